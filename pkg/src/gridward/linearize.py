"""State-space assembly around an operating point.

Inputs are defender EV power changes per EV bus, disturbances are attack
power changes per attack bus (both in pu added load on the system base),
outputs are machine frequencies in Hz.  All matrices come from central
finite differences of the nonlinear right-hand side with the network
re-solved per perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .case import GridCase
from .dynamics import DynamicModel, DynamicState, STATE_BLOCKS
from .errors import CaseFormatError, NonConvergence

SSM_SCHEMA = "statespace-1"


@dataclass
class StateSpaceModel:
    a: np.ndarray
    b: np.ndarray
    b_d: np.ndarray
    c: np.ndarray
    d: np.ndarray
    d_d: np.ndarray
    state_labels: tuple[str, ...]
    input_labels: tuple[str, ...]
    disturbance_labels: tuple[str, ...]
    output_labels: tuple[str, ...]
    operating_point: str = ""

    @property
    def order(self) -> int:
        return self.a.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.a)

    def transfer(self, s: complex, disturbance: bool = False) -> np.ndarray:
        """Frequency response from inputs (or disturbances) to outputs."""
        b = self.b_d if disturbance else self.b
        d = self.d_d if disturbance else self.d
        n = self.order
        return self.c @ np.linalg.solve(s * np.eye(n) - self.a, b) + d

    def check_dimensions(self) -> None:
        n = self.order
        assert self.a.shape == (n, n)
        assert self.b.shape[0] == n and self.b_d.shape[0] == n
        m = self.c.shape[0]
        assert self.c.shape == (m, n)
        assert self.d.shape == (m, self.b.shape[1])
        assert self.d_d.shape == (m, self.b_d.shape[1])
        assert len(self.state_labels) == n
        assert len(self.input_labels) == self.b.shape[1]
        assert len(self.disturbance_labels) == self.b_d.shape[1]
        assert len(self.output_labels) == m


def find_equilibrium(
    model: DynamicModel,
    init: DynamicState,
    tol: float = 1e-10,
    max_iter: int = 20,
) -> DynamicState:
    """Newton-polish the state until the derivative norm is below tol."""
    x = init.x.copy()
    zero_inj = np.zeros(model.n_bus, dtype=complex)
    resid = np.max(np.abs(model.rhs(x, zero_inj)))
    if resid < tol:
        return DynamicState(x=x, time=init.time)
    for _ in range(max_iter):
        jac = model.state_jacobian(x)
        f = model.rhs(x, zero_inj)
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise NonConvergence("singular Jacobian in equilibrium refinement") from exc
        x = x - dx
        resid = np.max(np.abs(model.rhs(x, zero_inj)))
        if resid < tol:
            return DynamicState(x=x, time=init.time)
    raise NonConvergence(
        f"equilibrium refinement stalled at residual {resid:.2e}",
        iterations=max_iter,
        residual=resid,
    )


def linearize_model(
    case: GridCase,
    model: DynamicModel,
    eq: DynamicState,
    dp_eps: float = 1e-5,
    state_eps: float = 1e-6,
) -> StateSpaceModel:
    """Build (A, B, B_d, C, D, D_d) at the given equilibrium.

    Input channels: (dP, dQ) per EV bus; disturbance channels: (dP, dQ)
    per attack bus; outputs: machine frequencies in Hz.
    """
    if dp_eps <= 0 or state_eps <= 0:
        raise ValueError("perturbation sizes must be > 0")
    a_full = model.state_jacobian(eq.x, eps=state_eps)
    b_full = model.injection_jacobian(eq.x, case.ev_buses, eps=dp_eps)
    bd_full = model.injection_jacobian(eq.x, case.attack_buses, eps=dp_eps)

    m = model.n_mach
    n = model.n_states

    # The physics is invariant to a uniform rotor-angle shift, so the full
    # Jacobian carries an exactly unobservable zero mode.  Express angles
    # relative to the highest-inertia machine: order drops by one and A
    # becomes strictly Hurwitz with identical input/output behavior.
    ref = int(np.argmax(model.h))
    keep = [i for i in range(n) if i != ref]
    p = np.zeros((n - 1, n))
    for r, i in enumerate(keep):
        p[r, i] = 1.0
        if i < m:  # delta block: relative to the reference machine
            p[r, ref] = -1.0
    q = np.zeros((n, n - 1))
    for r, i in enumerate(keep):
        q[i, r] = 1.0  # delta_ref pinned at zero in the embedding

    a = p @ a_full @ q
    b = p @ b_full
    b_d = p @ bd_full

    c_full = np.zeros((m, n))
    # Frequency is the speed state scaled to Hz; no algebraic feedthrough.
    c_full[:, m : 2 * m] = np.eye(m) * case.f_nominal
    c = c_full @ q
    d = np.zeros((m, b.shape[1]))
    d_d = np.zeros((m, b_d.shape[1]))

    full_labels = [
        f"{blk}@{bus}" for blk in STATE_BLOCKS for bus in model.machine_buses
    ]
    ref_bus = model.machine_buses[ref]
    state_labels = tuple(
        f"{full_labels[i]}-rel{ref_bus}" if i < m else full_labels[i] for i in keep
    )
    input_labels = tuple(
        f"{ch}@{bus}" for bus in case.ev_buses for ch in ("dP", "dQ")
    )
    dist_labels = tuple(
        f"{ch}@{bus}" for bus in case.attack_buses for ch in ("dP", "dQ")
    )
    output_labels = tuple(f"f@{bus}" for bus in model.machine_buses)

    ssm = StateSpaceModel(
        a=a,
        b=b,
        b_d=b_d,
        c=c,
        d=d,
        d_d=d_d,
        state_labels=state_labels,
        input_labels=input_labels,
        disturbance_labels=dist_labels,
        output_labels=output_labels,
        operating_point=f"case f_nominal={case.f_nominal} n_mach={m}",
    )
    ssm.check_dimensions()
    return ssm


# ---- serialization ------------------------------------------------------


def _write_matrix(lines, name, mat):
    lines.append(f"[{name}]")
    lines.append(f"shape {mat.shape[0]} {mat.shape[1]}")
    for row in np.atleast_2d(mat):
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append("")


def serialize_statespace(ssm: StateSpaceModel) -> str:
    lines = [f"schema {SSM_SCHEMA}", ""]
    lines.append("[labels]")
    lines.append("states " + " ".join(ssm.state_labels))
    lines.append("inputs " + " ".join(ssm.input_labels))
    lines.append("disturbances " + " ".join(ssm.disturbance_labels))
    lines.append("outputs " + " ".join(ssm.output_labels))
    lines.append("operating_point " + (ssm.operating_point or "-"))
    lines.append("")
    for name, mat in (
        ("a", ssm.a),
        ("b", ssm.b),
        ("b_d", ssm.b_d),
        ("c", ssm.c),
        ("d", ssm.d),
        ("d_d", ssm.d_d),
    ):
        _write_matrix(lines, name, mat)
    return "\n".join(lines)


def parse_statespace(text: str) -> StateSpaceModel:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[0] != f"schema {SSM_SCHEMA}":
        raise CaseFormatError("not a state-space document")
    labels: dict[str, tuple[str, ...]] = {}
    mats: dict[str, np.ndarray] = {}
    op = ""
    i = 1
    section = None
    rows: list[list[float]] = []
    shape = None

    def close(sec, shp, rws):
        if sec in ("a", "b", "b_d", "c", "d", "d_d"):
            m = np.array(rws, dtype=float).reshape(shp)
            mats[sec] = m

    while i < len(lines):
        ln = lines[i]
        if ln.startswith("[") and ln.endswith("]"):
            if section:
                close(section, shape, rows)
            section = ln[1:-1]
            rows = []
            shape = None
        elif section == "labels":
            key, _, rest = ln.partition(" ")
            if key == "operating_point":
                op = "" if rest == "-" else rest
            else:
                labels[key] = tuple(rest.split())
        elif ln.startswith("shape "):
            _, r, c = ln.split()
            shape = (int(r), int(c))
        else:
            rows.append([float(tok) for tok in ln.split()])
        i += 1
    if section:
        close(section, shape, rows)
    try:
        ssm = StateSpaceModel(
            a=mats["a"],
            b=mats["b"],
            b_d=mats["b_d"],
            c=mats["c"],
            d=mats["d"],
            d_d=mats["d_d"],
            state_labels=labels["states"],
            input_labels=labels["inputs"],
            disturbance_labels=labels["disturbances"],
            output_labels=labels["outputs"],
            operating_point=op,
        )
    except KeyError as exc:
        raise CaseFormatError(f"state-space document missing section {exc}") from None
    ssm.check_dimensions()
    return ssm
