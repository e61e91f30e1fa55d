"""Scenario documents, pipeline orchestration, metrics, and artifacts.

A scenario names a case, an attack, and a mitigation configuration; the
runner chains power flow -> dynamics init -> (linearize -> reduce ->
synthesize, when a controller or a mode-targeted attack needs them) ->
nonlinear simulation, then computes RunReport metrics and writes the
trajectory CSV, the report document, and SVG plots.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import (
    AttackSpec,
    dynamic_attack,
    identify_target_mode,
    static_attack,
    switching_attack,
)
from .case import GridCase, load_case
from .dynamics import (
    Trajectory,
    init_dynamics,
    serialize_trajectory_csv,
    simulate,
)
from .errors import IncompatibleBaseline, StageFailure
from .linearize import find_equilibrium, linearize_model
from .network import solve_powerflow
from .mitigation import DelayModel, FleetModel, build_controller, energy_impact, event_cost, fleet_capacity
from .modred import balanced_truncate
from .synth import (
    SynthesisArtifacts,
    design_observer,
    disturbance_weighted_q,
    hinf_synthesize,
    serialize_artifacts,
    verify_design,
)

log = logging.getLogger("gridward.scenario")

SCENARIO_SCHEMA = "scenario-1"
REPORT_SCHEMA = "report-1"
SETTLING_BAND_HZ = 0.05
SUSTAINED_1HZ_WINDOW_S = 5.0   # desk-scale proxy for the 3-minute rule
DEFAULT_A1 = 1.0
DEFAULT_GAIN_BOUND = 200.0
DEFAULT_ENERGY = 0.999


@dataclass(frozen=True)
class MitigationSettings:
    enabled: bool = False
    capacity_scale: float = 1.0
    v2g: bool = True
    delay: bool = False
    colocation: str = "full"   # full | excluded

    def __post_init__(self):
        if self.capacity_scale <= 0:
            raise ValueError("capacity_scale must be > 0")
        if self.colocation not in ("full", "excluded"):
            raise ValueError("colocation must be 'full' or 'excluded'")


@dataclass(frozen=True)
class Scenario:
    name: str
    case: str = "ne39"
    pss_enabled: bool = True
    attack: AttackSpec | None = None
    mitigation: MitigationSettings = field(default_factory=MitigationSettings)
    t_end: float = 40.0
    dt: float = 2e-3
    seed: int = 0
    baseline: str | None = None
    a1: float = DEFAULT_A1
    reduction_energy: float = DEFAULT_ENERGY

    def __post_init__(self):
        if not self.name:
            raise ValueError("scenario needs a name")
        if self.t_end <= 0 or self.dt <= 0:
            raise ValueError("t_end and dt must be > 0")
        if self.attack is not None and self.t_end <= self.attack.t_start:
            raise ValueError("t_end must exceed the attack start")
        if self.a1 <= 0:
            raise ValueError("a1 must be > 0")
        if not (0.0 < self.reduction_energy <= 1.0):
            raise ValueError("reduction_energy must be in (0, 1]")


@dataclass
class RunReport:
    scenario: str
    max_freq_deviation_hz: float
    settling_time_s: float | None
    impact_reduction_pct: float | None
    baseline: str | None
    stability_flag: str            # stable | sustained-oscillation | divergent
    breach_2_5pct: bool
    sustained_1hz: bool
    economics: dict | None = None
    seed: int | None = None
    config_hash: str = ""


# ---- scenario document --------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_scenario(sc: Scenario) -> str:
    out = [f"schema {SCENARIO_SCHEMA}", "", "[scenario]"]
    out.append(f"name {sc.name}")
    out.append(f"case {sc.case}")
    out.append(f"pss {'on' if sc.pss_enabled else 'off'}")
    out.append(f"t_end {_fmt(sc.t_end)}")
    out.append(f"dt {_fmt(sc.dt)}")
    out.append(f"seed {sc.seed}")
    out.append(f"baseline {sc.baseline if sc.baseline else 'none'}")
    out.append(f"a1 {_fmt(sc.a1)}")
    out.append(f"reduction_energy {_fmt(sc.reduction_energy)}")
    out.append("")
    if sc.attack is not None:
        a = sc.attack
        out.append("[attack]")
        out.append(f"kind {a.kind}")
        out.append(f"total_mw {_fmt(a.total_mw)}")
        out.append("buses " + " ".join(str(b) for b in a.buses))
        out.append("fractions " + " ".join(_fmt(f) for f in a.fractions))
        out.append(f"t_start {_fmt(a.t_start)}")
        out.append(f"freq_hz {'auto' if a.freq_hz is None else _fmt(a.freq_hz)}")
        out.append(f"duty {_fmt(a.duty)}")
        out.append(f"sigma_target {_fmt(a.sigma_target)}")
        out.append(f"gain_scale {_fmt(a.gain_scale)}")
        out.append("")
    m = sc.mitigation
    out.append("[mitigation]")
    out.append(f"enabled {'on' if m.enabled else 'off'}")
    out.append(f"capacity_scale {_fmt(m.capacity_scale)}")
    out.append(f"v2g {'on' if m.v2g else 'off'}")
    out.append(f"delay {'on' if m.delay else 'off'}")
    out.append(f"colocation {m.colocation}")
    out.append("")
    return "\n".join(out)


def _kv_sections(text: str, schema: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    schema_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not schema_seen:
            parts = line.split()
            if len(parts) != 2 or parts[0] != "schema" or parts[1] != schema:
                raise ValueError(f"line {lineno}: expected 'schema {schema}'")
            schema_seen = True
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = {}
            continue
        if current is None:
            raise ValueError(f"line {lineno}: key before any [section]")
        key, _, val = line.partition(" ")
        sections[current][key] = val.strip()
    if not schema_seen:
        raise ValueError("empty document: missing schema line")
    return sections


def parse_scenario(text: str) -> Scenario:
    sec = _kv_sections(text, SCENARIO_SCHEMA)
    if "scenario" not in sec:
        raise ValueError("missing [scenario] section")
    s = sec["scenario"]
    attack = None
    if "attack" in sec:
        a = sec["attack"]
        freq = a.get("freq_hz", "auto")
        attack = AttackSpec(
            kind=a["kind"],
            total_mw=float(a["total_mw"]),
            buses=tuple(int(b) for b in a["buses"].split()),
            fractions=tuple(float(f) for f in a.get("fractions", "").split()),
            t_start=float(a.get("t_start", 5.0)),
            freq_hz=None if freq == "auto" else float(freq),
            duty=float(a.get("duty", 0.5)),
            sigma_target=float(a.get("sigma_target", 0.2)),
            gain_scale=float(a.get("gain_scale", 2.0)),
        )
    m = sec.get("mitigation", {})
    mitigation = MitigationSettings(
        enabled=m.get("enabled", "off") == "on",
        capacity_scale=float(m.get("capacity_scale", 1.0)),
        v2g=m.get("v2g", "on") == "on",
        delay=m.get("delay", "off") == "on",
        colocation=m.get("colocation", "full"),
    )
    baseline = s.get("baseline", "none")
    return Scenario(
        name=s["name"],
        case=s.get("case", "ne39"),
        pss_enabled=s.get("pss", "on") == "on",
        attack=attack,
        mitigation=mitigation,
        t_end=float(s.get("t_end", 40.0)),
        dt=float(s.get("dt", 2e-3)),
        seed=int(s.get("seed", 0)),
        baseline=None if baseline == "none" else baseline,
        a1=float(s.get("a1", DEFAULT_A1)),
        reduction_energy=float(s.get("reduction_energy", DEFAULT_ENERGY)),
    )


def config_hash(sc: Scenario) -> str:
    return hashlib.sha256(serialize_scenario(sc).encode()).hexdigest()[:16]


# ---- metrics ------------------------------------------------------------


def compute_metrics(
    traj: Trajectory,
    baseline: Trajectory | None = None,
    band_hz: float = SETTLING_BAND_HZ,
    fleet: FleetModel | None = None,
) -> RunReport:
    """RunReport metrics from a trajectory, optionally against a baseline.

    Reduction is 1 - (max dev)/(max baseline dev); settling is the first
    grid time after which |deviation| stays inside the band for the rest
    of the run.
    """
    dev = np.max(np.abs(traj.freq_deviation_hz()), axis=1)
    max_dev = float(dev.max()) if dev.size else 0.0

    settling = None
    if not traj.diverged and dev.size:
        inside = dev < band_hz
        # last index where we are outside the band
        outside = np.nonzero(~inside)[0]
        if outside.size == 0:
            settling = float(traj.t[0])
        elif outside[-1] + 1 < dev.size:
            settling = float(traj.t[outside[-1] + 1])

    if traj.diverged:
        flag = "divergent"
    elif settling is None and dev.size and dev[2 * dev.size // 3 :].max() >= band_hz:
        flag = "sustained-oscillation"
    else:
        flag = "stable"

    breach = max_dev > 0.025 * traj.f_nominal
    sustained_1hz = bool(traj.diverged and max_dev >= 1.0)
    if not sustained_1hz and dev.size > 1:
        dt = traj.dt
        need = max(1, int(round(SUSTAINED_1HZ_WINDOW_S / dt))) if dt > 0 else dev.size
        run = 0
        for hot in dev >= 1.0:
            run = run + 1 if hot else 0
            if run >= need:
                sustained_1hz = True
                break

    reduction = None
    base_name = None
    if baseline is not None:
        if abs(baseline.dt - traj.dt) > 1e-12 or baseline.f_nominal != traj.f_nominal:
            raise IncompatibleBaseline(
                "baseline trajectory has a different grid or nominal frequency"
            )
        base_dev = float(np.max(np.abs(baseline.freq_deviation_hz()))) if baseline.t.size else 0.0
        if base_dev <= 0:
            raise IncompatibleBaseline("baseline has zero deviation")
        reduction = 100.0 * (1.0 - max_dev / base_dev)
        base_name = "baseline"

    economics = None
    if traj.defender_p_mw.size and np.any(np.abs(traj.defender_p_mw) > 1e-9):
        fm = fleet or FleetModel()
        cap = fleet_capacity(fm)
        connected = cap["connected_evs"]
        total_mw = np.sum(np.abs(traj.defender_p_mw), axis=1)
        per_ev_kw = total_mw * 1000.0 / connected
        impact = energy_impact(traj.t, per_ev_kw, fm)
        active = np.abs(per_ev_kw) > 0
        duration = float(traj.t[active][-1] - traj.t[active][0]) if np.any(active) else 0.0
        cost = event_cost(duration, fm, connected)
        economics = {
            "participating_evs": connected,
            "event_duration_s": duration,
            **impact,
            **cost,
        }

    return RunReport(
        scenario="",
        max_freq_deviation_hz=max_dev,
        settling_time_s=settling,
        impact_reduction_pct=reduction,
        baseline=base_name,
        stability_flag=flag,
        breach_2_5pct=breach,
        sustained_1hz=sustained_1hz,
        economics=economics,
    )


def serialize_report(rep: RunReport) -> str:
    out = [f"schema {REPORT_SCHEMA}", "", "[report]"]
    out.append(f"scenario {rep.scenario}")
    out.append(f"config_hash {rep.config_hash}")
    out.append(f"seed {rep.seed if rep.seed is not None else 'none'}")
    out.append(f"max_freq_deviation_hz {_fmt(rep.max_freq_deviation_hz)}")
    out.append(
        "settling_time_s "
        + ("none" if rep.settling_time_s is None else _fmt(rep.settling_time_s))
    )
    out.append(
        "impact_reduction_pct "
        + ("none" if rep.impact_reduction_pct is None else _fmt(rep.impact_reduction_pct))
    )
    out.append(f"baseline {rep.baseline if rep.baseline else 'none'}")
    out.append(f"stability_flag {rep.stability_flag}")
    out.append(f"breach_2_5pct {'yes' if rep.breach_2_5pct else 'no'}")
    out.append(f"sustained_1hz {'yes' if rep.sustained_1hz else 'no'}")
    out.append("")
    if rep.economics:
        out.append("[economics]")
        for key, val in rep.economics.items():
            out.append(f"{key} {val!r}" if isinstance(val, int) else f"{key} {_fmt(val)}")
        out.append("")
    return "\n".join(out)


# ---- pipeline -----------------------------------------------------------


def _stage(name: str):
    """Wrap a pipeline stage so failures carry the stage name."""

    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            log.info("stage %s ...", name)
            return self

        def __exit__(self, exc_type, exc, tb):
            dt = time.perf_counter() - self.t0
            if exc is None:
                log.info("stage %s done (%.1fs)", name, dt)
                return False
            if isinstance(exc, StageFailure):
                return False
            raise StageFailure(f"stage {name!r} failed: {exc}") from exc

    return _Ctx()


@dataclass
class PipelineResult:
    case: GridCase
    trajectory: Trajectory
    artifacts: SynthesisArtifacts | None
    resolved_attack: AttackSpec | None


def synthesize_for_case(
    case: GridCase,
    a1: float = DEFAULT_A1,
    energy: float = DEFAULT_ENERGY,
    gain_bound: float = DEFAULT_GAIN_BOUND,
) -> SynthesisArtifacts:
    """Design pipeline on the PSS-enabled plant: linearize, reduce,
    synthesize the H-inf gain, and fit the observer with the estimator
    weighting concentrated along the attack-bus disturbance directions.
    """
    design_case = case.with_pss(True)
    pf_d = solve_powerflow(design_case)
    model_d, x0_d = init_dynamics(design_case, pf_d)
    eq_d = find_equilibrium(model_d, x0_d)
    ssm = linearize_model(design_case, model_d, eq_d)
    reduced = balanced_truncate(ssm, energy=energy)
    sol = hinf_synthesize(reduced.ssm, a1=a1, gain_bound=gain_bound)
    w_cols = [
        reduced.ssm.disturbance_labels.index(f"dP@{b}") for b in design_case.attack_buses
    ]
    obs = design_observer(
        reduced.ssm, sol.k_mit, q_weight=disturbance_weighted_q(reduced.ssm, w_cols)
    )
    report = verify_design(reduced.ssm, ssm, obs, sol)
    if not report.passed:
        raise StageFailure(f"design verification failed: {report.checks}")
    return SynthesisArtifacts(reduced, obs, sol)


def run_pipeline(sc: Scenario, baseline_traj: Trajectory | None = None) -> tuple[RunReport, PipelineResult]:
    """Run one scenario end to end and compute its report."""
    with _stage("case"):
        case = load_case(sc.case).with_pss(sc.pss_enabled)
        if sc.mitigation.colocation == "excluded":
            case = case.with_ev_buses(
                b for b in case.ev_buses if b not in case.attack_buses
            )

    with _stage("powerflow"):
        pf = solve_powerflow(case)

    with _stage("dynamics-init"):
        model, x0 = init_dynamics(case, pf)
        eq = find_equilibrium(model, x0)

    # The attacker's model view and any auto frequency resolution.
    attack = sc.attack
    ssm_view = None
    if attack is not None and (attack.kind == "dynamic" or (attack.kind == "switching" and attack.freq_hz is None)):
        with _stage("linearize-attacker-view"):
            ssm_view = linearize_model(case, model, eq)
        if attack.kind == "switching" and attack.freq_hz is None:
            mode = identify_target_mode(ssm_view)
            attack = replace(attack, freq_hz=mode.freq_hz)

    with _stage("attack"):
        schedules = []
        if attack is not None and attack.total_mw > 0:
            if attack.kind == "static":
                schedules.append(static_attack(attack))
            elif attack.kind == "switching":
                schedules.append(switching_attack(attack))
            else:
                schedules.append(dynamic_attack(ssm_view, attack))
            for s in schedules:
                s.validate(case)

    artifacts = None
    controller = None
    if sc.mitigation.enabled:
        with _stage("synthesize"):
            artifacts = synthesize_for_case(case, a1=sc.a1, energy=sc.reduction_energy)
        with _stage("controller"):
            fm = FleetModel()
            cap = fleet_capacity(fm)["capacity_mw"]
            controller = build_controller(
                artifacts,
                case,
                cap,
                capacity_scale=sc.mitigation.capacity_scale,
                v2g_enabled=sc.mitigation.v2g,
                delay=DelayModel(enabled=sc.mitigation.delay, seed=sc.seed),
            )

    with _stage("simulate"):
        record_every = max(1, int(round(0.01 / sc.dt)))
        traj = simulate(
            case,
            model,
            eq,
            schedules,
            t_end=sc.t_end,
            dt=sc.dt,
            controller=controller,
            record_every=record_every,
        )
        if controller is not None:
            _attach_telemetry(traj, controller)

    with _stage("metrics"):
        rep = compute_metrics(traj, baseline=baseline_traj)
        rep.scenario = sc.name
        rep.seed = sc.seed
        rep.config_hash = config_hash(sc)
        if rep.baseline is not None and sc.baseline:
            rep.baseline = sc.baseline

    return rep, PipelineResult(case, traj, artifacts, attack)


def _attach_telemetry(traj: Trajectory, controller) -> None:
    """Resample controller telemetry onto the trajectory record grid."""
    tel = controller.telemetry
    ts = np.asarray(tel.get("t", []), dtype=float)
    if ts.size == 0:
        return
    idx = np.clip(np.searchsorted(ts, traj.t, side="right") - 1, 0, ts.size - 1)
    traj.telemetry["xhat_norm"] = np.asarray(tel["x_hat_norm"], dtype=float)[idx]
    traj.telemetry["saturated"] = np.asarray(tel["saturated"], dtype=float)[idx]
    delays = tel.get("delays_ms", [])
    if delays:
        mean_ms = np.array([float(np.mean(d)) for d in delays])
        n = min(mean_ms.size, ts.size)
        traj.telemetry["delay_ms"] = mean_ms[:n][idx.clip(max=n - 1)]


# ---- artifact export ----------------------------------------------------


def _plot_traces(path: Path, t, series, labels, title, ylabel):
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for j, lbl in enumerate(labels):
        ax.plot(t, series[:, j], lw=0.9, label=lbl)
    ax.set_xlabel("time [s]")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(labels) <= 12:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def export_artifacts(
    rep: RunReport,
    result: PipelineResult,
    out_dir: str | Path,
    plots: bool = True,
) -> list[Path]:
    """Write trajectory.csv, report.txt, synthesis artifacts, and plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        traj = result.trajectory
        p = out / "trajectory.csv"
        p.write_text(serialize_trajectory_csv(traj))
        written.append(p)
        p = out / "report.txt"
        p.write_text(serialize_report(rep))
        written.append(p)
        if result.artifacts is not None:
            p = out / "synthesis.txt"
            p.write_text(serialize_artifacts(result.artifacts))
            written.append(p)
        if plots:
            p = out / "frequency.svg"
            _plot_traces(
                p,
                traj.t,
                traj.freq_hz,
                [f"gen@{b}" for b in traj.machine_buses],
                f"{rep.scenario}: machine frequencies",
                "frequency [Hz]",
            )
            written.append(p)
            if traj.attack_p_mw.size:
                p = out / "attack.svg"
                _plot_traces(
                    p,
                    traj.t,
                    traj.attack_p_mw,
                    [f"bus {b}" for b in traj.attack_buses],
                    f"{rep.scenario}: attack load",
                    "dP [MW]",
                )
                written.append(p)
            if traj.defender_p_mw.size and np.any(traj.defender_p_mw):
                p = out / "mitigation.svg"
                _plot_traces(
                    p,
                    traj.t,
                    traj.defender_p_mw,
                    [f"bus {b}" for b in traj.defender_buses],
                    f"{rep.scenario}: EV mitigation load",
                    "dP [MW]",
                )
                written.append(p)
    except OSError:
        for f in written:
            f.unlink(missing_ok=True)
        raise
    return written


def run_scenario(
    sc: Scenario,
    out_dir: str | Path,
    baseline_traj: Trajectory | None = None,
    plots: bool = True,
) -> RunReport:
    rep, result = run_pipeline(sc, baseline_traj=baseline_traj)
    export_artifacts(rep, result, out_dir, plots=plots)
    return rep


# ---- bundled scenario library -------------------------------------------

_ATTACK_KINDS = {"attack1": "static", "attack2": "switching", "attack3": "dynamic"}


def _mk_attack(tag: str) -> AttackSpec:
    return AttackSpec(
        kind=_ATTACK_KINDS[tag],
        total_mw=800.0,
        buses=(3, 4, 24, 29),
        freq_hz=None,
    )


def bundled_scenarios() -> dict[str, Scenario]:
    """The case-study matrix: {attack1|2|3} x {pss off|on} x {mitigation
    off|on}, plus the delay, 75%-capacity, and no-colocation variants.
    Mitigated runs name their PSS-matched unmitigated run as baseline.
    """
    lib: dict[str, Scenario] = {}
    for tag in ("attack1", "attack2", "attack3"):
        for pss in (False, True):
            ptag = "psson" if pss else "pssoff"
            base_name = f"{tag}-{ptag}"
            lib[base_name] = Scenario(name=base_name, pss_enabled=pss, attack=_mk_attack(tag))
            mit_name = f"{tag}-{ptag}-mitigated"
            lib[mit_name] = Scenario(
                name=mit_name,
                pss_enabled=pss,
                attack=_mk_attack(tag),
                mitigation=MitigationSettings(enabled=True),
                baseline=base_name,
            )
    lib["attack2-delay"] = Scenario(
        name="attack2-delay",
        attack=_mk_attack("attack2"),
        mitigation=MitigationSettings(enabled=True, delay=True),
        baseline="attack2-psson",
    )
    lib["attack2-75pct"] = Scenario(
        name="attack2-75pct",
        attack=_mk_attack("attack2"),
        mitigation=MitigationSettings(enabled=True, capacity_scale=0.75),
        baseline="attack2-psson",
    )
    lib["attack2-no-colocation"] = Scenario(
        name="attack2-no-colocation",
        attack=_mk_attack("attack2"),
        mitigation=MitigationSettings(enabled=True, colocation="excluded"),
        baseline="attack2-psson",
    )
    lib["attack3-no-colocation"] = Scenario(
        name="attack3-no-colocation",
        attack=_mk_attack("attack3"),
        mitigation=MitigationSettings(enabled=True, colocation="excluded"),
        baseline="attack3-psson",
    )
    return lib


def derive_seed(batch_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{batch_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2**31)


def run_batch(
    scenarios: list[Scenario],
    out_root: str | Path,
    batch_seed: int | None = None,
    plots: bool = True,
) -> dict[str, RunReport]:
    """Run scenarios sequentially, baselines before dependents; each run
    writes into its own subdirectory of out_root."""
    byname = {sc.name: sc for sc in scenarios}
    if batch_seed is not None:
        byname = {
            name: replace(sc, seed=derive_seed(batch_seed, name))
            for name, sc in byname.items()
        }
    ordered: list[Scenario] = []
    seen: set[str] = set()

    def visit(name: str, chain: tuple[str, ...] = ()):
        if name in seen:
            return
        if name in chain:
            raise ValueError(f"baseline cycle through {name!r}")
        sc = byname[name]
        if sc.baseline is not None and sc.baseline in byname:
            visit(sc.baseline, chain + (name,))
        seen.add(name)
        ordered.append(sc)

    for name in byname:
        visit(name)

    out_root = Path(out_root)
    trajs: dict[str, Trajectory] = {}
    reports: dict[str, RunReport] = {}
    for sc in ordered:
        baseline_traj = trajs.get(sc.baseline) if sc.baseline else None
        rep, result = run_pipeline(sc, baseline_traj=baseline_traj)
        export_artifacts(rep, result, out_root / sc.name, plots=plots)
        trajs[sc.name] = result.trajectory
        reports[sc.name] = rep
    return reports
