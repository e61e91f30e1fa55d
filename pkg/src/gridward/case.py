"""Grid case model: typed records, a plain-text case format, and validation.

The case document is a sectioned UTF-8 text file (see docs/case-format.md).
Numbers are decimal with optional exponent, '#' starts a comment, and '-'
marks an absent optional value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import (
    CaseFormatError,
    DuplicateBusId,
    InvariantViolation,
    NoSlackBus,
    UnknownBusRef,
)

SCHEMA_TAG = "gridcase-1"

BUS_KINDS = ("slack", "PV", "PQ")


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # slack | PV | PQ
    p_load: float = 0.0
    q_load: float = 0.0
    v_setpoint: float | None = None
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Exciter:
    k_a: float
    t_a: float
    v_ref: float | None = None  # derived at dynamic init when absent


@dataclass(frozen=True)
class Governor:
    r_droop: float
    t_g: float


@dataclass(frozen=True)
class Turbine:
    t_ch: float


@dataclass(frozen=True)
class Pss:
    k_pss: float
    t_w: float
    t_1: float
    t_2: float
    enabled: bool = True


@dataclass(frozen=True)
class Agc:
    """Slow leaky frequency-integral (secondary) control on the governor
    reference; the leak keeps the load-sharing modes strictly stable."""

    k_i: float = 0.0
    t_leak: float = 1000.0
    enabled: bool = False


@dataclass(frozen=True)
class Machine:
    bus: int
    h: float
    d: float
    x_d: float
    x_d_prime: float
    t_d0_prime: float
    exciter: Exciter
    governor: Governor
    turbine: Turbine
    pss: Pss
    # Scheduled active output (pu on system base) used by the power flow for
    # PV buses; ignored for the slack machine.
    p_set: float | None = None
    agc: Agc = Agc()


@dataclass(frozen=True)
class Load:
    bus: int
    p: float  # pu on system base
    q: float


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    f_nominal: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    machines: tuple[Machine, ...]
    loads: tuple[Load, ...]
    ev_buses: tuple[int, ...] = ()
    attack_buses: tuple[int, ...] = ()

    # ---- derived views -------------------------------------------------

    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def slack_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    def machine_buses(self) -> list[int]:
        return [m.bus for m in self.machines]

    def load_bus_ids(self) -> list[int]:
        """Buses carrying demand, from bus records or load entries."""
        ids = {ld.bus for ld in self.loads}
        ids.update(b.id for b in self.buses if b.p_load != 0.0 or b.q_load != 0.0)
        return sorted(ids)

    def demand(self) -> dict[int, complex]:
        """Total complex demand per bus (pu), bus records plus load entries."""
        s: dict[int, complex] = {b.id: complex(b.p_load, b.q_load) for b in self.buses}
        for ld in self.loads:
            s[ld.bus] += complex(ld.p, ld.q)
        return s

    def total_load_mw(self) -> float:
        return sum(v.real for v in self.demand().values()) * self.base_mva

    def with_pss(self, enabled: bool) -> "GridCase":
        machines = tuple(
            replace(m, pss=replace(m.pss, enabled=enabled)) for m in self.machines
        )
        return replace(self, machines=machines)

    def with_agc(self, enabled: bool) -> "GridCase":
        machines = tuple(
            replace(m, agc=replace(m.agc, enabled=enabled)) for m in self.machines
        )
        return replace(self, machines=machines)

    def with_ev_buses(self, ev_buses) -> "GridCase":
        case = replace(self, ev_buses=tuple(ev_buses))
        validate_case(case)
        return case


# ---- validation --------------------------------------------------------


def _finite(x) -> bool:
    return x is not None and math.isfinite(x)


def validate_case(case: GridCase) -> None:
    if case.base_mva <= 0:
        raise InvariantViolation("base_mva must be > 0")
    if case.f_nominal <= 0:
        raise InvariantViolation("f_nominal must be > 0")

    seen: set[int] = set()
    for b in case.buses:
        if b.id in seen:
            raise DuplicateBusId(f"duplicate bus id {b.id}")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            raise InvariantViolation(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (_finite(b.p_load) and _finite(b.q_load)):
            raise InvariantViolation(f"bus {b.id}: demand must be finite")
        if b.kind == "PQ" and b.v_setpoint is not None:
            raise InvariantViolation(f"bus {b.id}: PQ bus carries a v_setpoint")
        if b.kind in ("slack", "PV") and (b.v_setpoint is None or b.v_setpoint <= 0):
            raise InvariantViolation(f"bus {b.id}: {b.kind} bus needs v_setpoint > 0")

    slack = [b for b in case.buses if b.kind == "slack"]
    if len(slack) != 1:
        raise NoSlackBus(f"expected exactly one slack bus, found {len(slack)}")

    ids = seen
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in ids:
                raise UnknownBusRef(f"branch {br.from_bus}-{br.to_bus}: bus {end} not in bus table")
        if br.r < 0 or br.x <= 0:
            raise InvariantViolation(
                f"branch {br.from_bus}-{br.to_bus}: need r >= 0 and x > 0"
            )
        if br.tap <= 0:
            raise InvariantViolation(f"branch {br.from_bus}-{br.to_bus}: tap must be > 0")

    for m in case.machines:
        if m.bus not in ids:
            raise UnknownBusRef(f"machine at bus {m.bus}: bus not in bus table")
        if m.h <= 0:
            raise InvariantViolation(f"machine at bus {m.bus}: h must be > 0")
        if not (m.x_d >= m.x_d_prime > 0):
            raise InvariantViolation(f"machine at bus {m.bus}: need x_d >= x_d' > 0")
        for name, tc in (
            ("t_d0_prime", m.t_d0_prime),
            ("exciter.t_a", m.exciter.t_a),
            ("governor.t_g", m.governor.t_g),
            ("turbine.t_ch", m.turbine.t_ch),
            ("pss.t_w", m.pss.t_w),
            ("pss.t_1", m.pss.t_1),
            ("pss.t_2", m.pss.t_2),
        ):
            if tc <= 0:
                raise InvariantViolation(f"machine at bus {m.bus}: {name} must be > 0")
        if m.governor.r_droop <= 0:
            raise InvariantViolation(f"machine at bus {m.bus}: r_droop must be > 0")
        if m.agc.k_i < 0:
            raise InvariantViolation(f"machine at bus {m.bus}: agc.k_i must be >= 0")
        if m.agc.t_leak <= 0:
            raise InvariantViolation(f"machine at bus {m.bus}: agc.t_leak must be > 0")

    for ld in case.loads:
        if ld.bus not in ids:
            raise UnknownBusRef(f"load at bus {ld.bus}: bus not in bus table")
        if not (_finite(ld.p) and _finite(ld.q)):
            raise InvariantViolation(f"load at bus {ld.bus}: demand must be finite")

    load_ids = set(case.load_bus_ids())
    for name, lst in (("ev_buses", case.ev_buses), ("attack_buses", case.attack_buses)):
        for bid in lst:
            if bid not in ids:
                raise UnknownBusRef(f"{name}: bus {bid} not in bus table")
            if bid not in load_ids:
                raise InvariantViolation(f"{name}: bus {bid} carries no load")


# ---- parsing -----------------------------------------------------------


def _num(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(f"{where}: bad number {tok!r}") from None


def _opt_num(tok: str, where: str) -> float | None:
    return None if tok == "-" else _num(tok, where)


def _split_sections(text: str, expect_schema: str) -> dict[str, list[tuple[int, str]]]:
    sections: dict[str, list[tuple[int, str]]] = {}
    current: list[tuple[int, str]] | None = None
    schema_seen = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not schema_seen:
            parts = line.split()
            if len(parts) != 2 or parts[0] != "schema":
                raise CaseFormatError(f"line {lineno}: expected 'schema {expect_schema}'")
            if parts[1] != expect_schema:
                raise CaseFormatError(f"line {lineno}: unsupported schema {parts[1]!r}")
            schema_seen = True
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            current = sections.setdefault(name, [])
            continue
        if current is None:
            raise CaseFormatError(f"line {lineno}: data outside any section")
        current.append((lineno, line))
    if not schema_seen:
        raise CaseFormatError("empty document: missing schema line")
    return sections


def parse_case(text: str) -> GridCase:
    """Parse and validate a case document."""
    sections = _split_sections(text, SCHEMA_TAG)

    base = {}
    for lineno, line in sections.get("base", []):
        parts = line.split()
        if len(parts) != 2:
            raise CaseFormatError(f"line {lineno}: base entries are 'key value'")
        base[parts[0]] = _num(parts[1], f"line {lineno}")
    if "base_mva" not in base or "f_nominal" not in base:
        raise CaseFormatError("[base] must define base_mva and f_nominal")

    buses = []
    for lineno, line in sections.get("buses", []):
        t = line.split()
        if len(t) != 6:
            raise CaseFormatError(f"line {lineno}: bus row needs 6 fields")
        buses.append(
            Bus(
                id=int(_num(t[0], f"line {lineno}")),
                kind=t[1],
                p_load=_num(t[2], f"line {lineno}"),
                q_load=_num(t[3], f"line {lineno}"),
                v_setpoint=_opt_num(t[4], f"line {lineno}"),
                shunt_b=_num(t[5], f"line {lineno}"),
            )
        )

    branches = []
    for lineno, line in sections.get("branches", []):
        t = line.split()
        if len(t) != 6:
            raise CaseFormatError(f"line {lineno}: branch row needs 6 fields")
        branches.append(
            Branch(
                from_bus=int(_num(t[0], f"line {lineno}")),
                to_bus=int(_num(t[1], f"line {lineno}")),
                r=_num(t[2], f"line {lineno}"),
                x=_num(t[3], f"line {lineno}"),
                b_charging=_num(t[4], f"line {lineno}"),
                tap=_num(t[5], f"line {lineno}"),
            )
        )

    machines = []
    for lineno, line in sections.get("machines", []):
        t = line.split()
        if len(t) not in (17, 19):
            raise CaseFormatError(f"line {lineno}: machine row needs 17 or 19 fields")
        w = f"line {lineno}"
        agc = Agc()
        if len(t) == 19:
            if "/" not in t[17]:
                raise CaseFormatError(f"{w}: agc field must be k_i/t_leak")
            ki, tleak = t[17].split("/", 1)
            agc = Agc(
                k_i=_num(ki, w),
                t_leak=_num(tleak, w),
                enabled=t[18] in ("1", "true", "on"),
            )
        machines.append(
            Machine(
                bus=int(_num(t[0], w)),
                h=_num(t[1], w),
                d=_num(t[2], w),
                x_d=_num(t[3], w),
                x_d_prime=_num(t[4], w),
                t_d0_prime=_num(t[5], w),
                p_set=_opt_num(t[6], w),
                exciter=Exciter(k_a=_num(t[7], w), t_a=_num(t[8], w), v_ref=_opt_num(t[9], w)),
                governor=Governor(r_droop=_num(t[10], w), t_g=_num(t[11], w)),
                turbine=Turbine(t_ch=_num(t[12], w)),
                pss=Pss(
                    k_pss=_num(t[13], w),
                    t_w=_num(t[14], w),
                    t_1=_num(t[15].split("/")[0], w),
                    t_2=_num(t[15].split("/")[1], w) if "/" in t[15] else _num(t[15], w),
                    enabled=t[16] in ("1", "true", "on"),
                ),
                agc=agc,
            )
        )

    loads = []
    for lineno, line in sections.get("loads", []):
        t = line.split()
        if len(t) != 3:
            raise CaseFormatError(f"line {lineno}: load row needs 3 fields")
        loads.append(
            Load(
                bus=int(_num(t[0], f"line {lineno}")),
                p=_num(t[1], f"line {lineno}"),
                q=_num(t[2], f"line {lineno}"),
            )
        )

    def id_list(name):
        out = []
        for lineno, line in sections.get(name, []):
            out.extend(int(_num(tok, f"line {lineno}")) for tok in line.split())
        return tuple(out)

    case = GridCase(
        base_mva=base["base_mva"],
        f_nominal=base["f_nominal"],
        buses=tuple(buses),
        branches=tuple(branches),
        machines=tuple(machines),
        loads=tuple(loads),
        ev_buses=id_list("ev_buses"),
        attack_buses=id_list("attack_buses"),
    )
    validate_case(case)
    return case


# ---- serialization -----------------------------------------------------


def _fmt(x: float | None) -> str:
    if x is None:
        return "-"
    return repr(float(x))


def serialize_case(case: GridCase) -> str:
    out = [f"schema {SCHEMA_TAG}", "", "[base]"]
    out.append(f"base_mva {_fmt(case.base_mva)}")
    out.append(f"f_nominal {_fmt(case.f_nominal)}")
    out.append("")
    out.append("[buses]")
    out.append("# id kind p_load q_load v_setpoint shunt_b")
    for b in case.buses:
        out.append(
            f"{b.id} {b.kind} {_fmt(b.p_load)} {_fmt(b.q_load)} "
            f"{_fmt(b.v_setpoint)} {_fmt(b.shunt_b)}"
        )
    out.append("")
    out.append("[branches]")
    out.append("# from to r x b_charging tap")
    for br in case.branches:
        out.append(
            f"{br.from_bus} {br.to_bus} {_fmt(br.r)} {_fmt(br.x)} "
            f"{_fmt(br.b_charging)} {_fmt(br.tap)}"
        )
    out.append("")
    out.append("[machines]")
    out.append(
        "# bus h d x_d x_d' t_d0' p_set k_a t_a v_ref r_droop t_g t_ch "
        "k_pss t_w t1/t2 pss_on k_agc/t_leak agc_on"
    )
    for m in case.machines:
        out.append(
            f"{m.bus} {_fmt(m.h)} {_fmt(m.d)} {_fmt(m.x_d)} {_fmt(m.x_d_prime)} "
            f"{_fmt(m.t_d0_prime)} {_fmt(m.p_set)} {_fmt(m.exciter.k_a)} "
            f"{_fmt(m.exciter.t_a)} {_fmt(m.exciter.v_ref)} "
            f"{_fmt(m.governor.r_droop)} {_fmt(m.governor.t_g)} {_fmt(m.turbine.t_ch)} "
            f"{_fmt(m.pss.k_pss)} {_fmt(m.pss.t_w)} "
            f"{_fmt(m.pss.t_1)}/{_fmt(m.pss.t_2)} {'1' if m.pss.enabled else '0'} "
            f"{_fmt(m.agc.k_i)}/{_fmt(m.agc.t_leak)} {'1' if m.agc.enabled else '0'}"
        )
    out.append("")
    out.append("[loads]")
    out.append("# bus p q")
    for ld in case.loads:
        out.append(f"{ld.bus} {_fmt(ld.p)} {_fmt(ld.q)}")
    out.append("")
    out.append("[ev_buses]")
    if case.ev_buses:
        out.append(" ".join(str(i) for i in case.ev_buses))
    out.append("")
    out.append("[attack_buses]")
    if case.attack_buses:
        out.append(" ".join(str(i) for i in case.attack_buses))
    out.append("")
    return "\n".join(out)


def load_case(name_or_path: str | Path) -> GridCase:
    """Load a bundled case by name ('ne39') or a case file by path."""
    p = Path(name_or_path)
    if p.suffix == ".case" and p.exists():
        return parse_case(p.read_text())
    ref = resources.files("gridward.data") / f"{name_or_path}.case"
    if ref.is_file():
        return parse_case(ref.read_text())
    if p.exists():
        return parse_case(p.read_text())
    raise CaseFormatError(f"no such case: {name_or_path}")
