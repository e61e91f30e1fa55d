"""Command-line interface.

Verbs: pf, lin, reduce, synth, run, batch.  Exit codes: 0 success,
1 validation failure, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import scenario as scn
from .case import load_case
from .dynamics import init_dynamics
from .errors import CaseFormatError, GridwardError, StageFailure
from .linearize import find_equilibrium, linearize_model, serialize_statespace
from .modred import balanced_truncate, serialize_reduced
from .network import solve_powerflow
from .synth import serialize_artifacts

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


def _write(out: str | None, text: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_pf(args) -> int:
    case = load_case(args.case)
    pf = solve_powerflow(case)
    lines = [f"# power flow: {args.case}  mismatch {pf.mismatch:.3e}  iterations {pf.iterations}"]
    lines.append("bus v_pu theta_rad")
    for b, v, th in zip(case.bus_ids(), pf.v, pf.theta):
        lines.append(f"{b} {v:.9f} {th:.9f}")
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def _linearized(args):
    case = load_case(args.case)
    pf = solve_powerflow(case)
    model, x0 = init_dynamics(case, pf)
    eq = find_equilibrium(model, x0)
    return case, linearize_model(case, model, eq)


def _cmd_lin(args) -> int:
    _, ssm = _linearized(args)
    _write(args.out, serialize_statespace(ssm))
    return EXIT_OK


def _cmd_reduce(args) -> int:
    _, ssm = _linearized(args)
    if args.order is not None:
        rm = balanced_truncate(ssm, order=args.order)
    else:
        rm = balanced_truncate(ssm, energy=scn.DEFAULT_ENERGY)
    _write(args.out, serialize_reduced(rm))
    return EXIT_OK


def _cmd_synth(args) -> int:
    case = load_case(args.case)
    artifacts = scn.synthesize_for_case(case, a1=args.a1)
    _write(args.out, serialize_artifacts(artifacts))
    return EXIT_OK


def _load_scenario(ref: str) -> scn.Scenario:
    lib = scn.bundled_scenarios()
    if ref in lib:
        return lib[ref]
    path = Path(ref)
    if not path.exists():
        raise ValueError(
            f"scenario {ref!r} is neither a bundled name nor an existing file"
        )
    return scn.parse_scenario(path.read_text())


def _apply_overrides(sc: scn.Scenario, args) -> scn.Scenario:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.dt is not None:
        updates["dt"] = args.dt
    if args.a1 is not None and args.a1 != scn.DEFAULT_A1:
        updates["a1"] = args.a1
    return replace(sc, **updates) if updates else sc


def _cmd_run(args) -> int:
    sc = _apply_overrides(_load_scenario(args.scenario), args)
    out = args.out or f"runs/{sc.name}"
    baseline_traj = None
    if sc.baseline:
        lib = scn.bundled_scenarios()
        if sc.baseline in lib:
            base = _apply_overrides(lib[sc.baseline], args)
            rep, result = scn.run_pipeline(base)
            scn.export_artifacts(rep, result, Path(out).parent / base.name, plots=not args.no_plots)
            baseline_traj = result.trajectory
    rep = scn.run_scenario(sc, out, baseline_traj=baseline_traj, plots=not args.no_plots)
    sys.stdout.write(scn.serialize_report(rep))
    return EXIT_OK


def _cmd_batch(args) -> int:
    if args.scenario == ["all"]:
        scenarios = list(scn.bundled_scenarios().values())
    else:
        scenarios = [_load_scenario(ref) for ref in args.scenario]
    out = args.out or "runs"
    reports = scn.run_batch(
        scenarios, out, batch_seed=args.seed, plots=not args.no_plots
    )
    for name in sorted(reports):
        rep = reports[name]
        sys.stdout.write(
            f"{name}: max_dev={rep.max_freq_deviation_hz:.4f} Hz "
            f"flag={rep.stability_flag}\n"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridward", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, case=True):
        if case:
            sp.add_argument("--case", default="ne39")
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("pf", help="solve the power flow")
    common(sp)
    sp.set_defaults(fn=_cmd_pf)

    sp = sub.add_parser("lin", help="emit the linearized state space")
    common(sp)
    sp.set_defaults(fn=_cmd_lin)

    sp = sub.add_parser("reduce", help="emit the balanced-truncation model")
    common(sp)
    sp.add_argument("--order", type=int, default=None)
    sp.set_defaults(fn=_cmd_reduce)

    sp = sub.add_parser("synth", help="emit synthesis artifacts")
    common(sp)
    sp.add_argument("--a1", type=float, default=scn.DEFAULT_A1)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("run", help="run one scenario")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--dt", type=float, default=None)
    sp.add_argument("--a1", type=float, default=None)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(fn=_cmd_run)

    sp = sub.add_parser("batch", help="run a list of scenarios")
    sp.add_argument("--scenario", action="append", required=True,
                    help="bundled name, file path, or 'all'; repeatable")
    sp.add_argument("--out", default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(fn=_cmd_batch)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (ValueError, CaseFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StageFailure as exc:
        if isinstance(exc.__cause__, OSError):
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        if isinstance(exc.__cause__, (ValueError, CaseFormatError)):
            print(f"validation error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GridwardError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
