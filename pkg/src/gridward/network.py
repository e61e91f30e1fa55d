"""Admittance-matrix construction and Newton-Raphson AC power flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .case import GridCase
from .errors import NonConvergence, SingularJacobian


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray          # per-bus voltage magnitude (pu)
    theta: np.ndarray      # per-bus angle (rad), slack at 0
    p_gen: np.ndarray      # per-machine active injection (pu)
    q_gen: np.ndarray      # per-machine reactive injection (pu)
    mismatch: float        # max residual (pu)
    iterations: int


def build_ybus(case: GridCase) -> np.ndarray:
    """Dense complex bus admittance matrix, ordered as case.buses.

    Pi-model branches with the off-nominal tap on the from side; half the
    line charging at each end; bus shunts on the diagonal.
    """
    idx = case.bus_index()
    n = len(case.buses)
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bsh = 1j * br.b_charging / 2.0
        a = br.tap
        y[f, f] += (ys + bsh) / (a * a)
        y[t, t] += ys + bsh
        y[f, t] += -ys / a
        y[t, f] += -ys / a
    for b in case.buses:
        y[idx[b.id], idx[b.id]] += 1j * b.shunt_b
    return y


def _injections(ybus, v, theta):
    """Complex power injected at each bus for the given voltage state."""
    vc = v * np.exp(1j * theta)
    return vc * np.conj(ybus @ vc)


def solve_powerflow(
    case: GridCase,
    tol: float = 1e-8,
    max_iter: int = 25,
    flat_start: bool = True,
    v0: np.ndarray | None = None,
    theta0: np.ndarray | None = None,
    extra_injection: dict[int, complex] | None = None,
) -> PowerFlowSolution:
    """Newton-Raphson on the polar mismatch equations.

    extra_injection adds constant-power injections (pu, positive into the
    bus) on top of the case demand; used to shift the operating point.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    idx = case.bus_index()
    n = len(case.buses)
    ybus = build_ybus(case)

    kinds = np.array([b.kind for b in case.buses])
    slack = int(np.flatnonzero(kinds == "slack")[0])
    pv = np.flatnonzero(kinds == "PV")
    pq = np.flatnonzero(kinds == "PQ")

    # Scheduled net injection: machine dispatch minus demand.
    demand = case.demand()
    s_sched = np.zeros(n, dtype=complex)
    for bid, s in demand.items():
        s_sched[idx[bid]] -= s
    for m in case.machines:
        if m.p_set is not None:
            s_sched[idx[m.bus]] += m.p_set
    if extra_injection:
        for bid, s in extra_injection.items():
            s_sched[idx[bid]] += s

    if flat_start or v0 is None or theta0 is None:
        v = np.ones(n)
        theta = np.zeros(n)
    else:
        v = v0.copy()
        theta = theta0.copy()
    for b in case.buses:
        if b.v_setpoint is not None:
            v[idx[b.id]] = b.v_setpoint

    ang_idx = np.concatenate([pv, pq])   # unknown angles
    mag_idx = pq                         # unknown magnitudes

    mismatch = np.inf
    for it in range(1, max_iter + 1):
        s_calc = _injections(ybus, v, theta)
        dp = s_sched.real - s_calc.real
        dq = s_sched.imag - s_calc.imag
        f = np.concatenate([dp[ang_idx], dq[mag_idx]])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch < tol:
            break

        # Polar Jacobian blocks (vectorized).
        vc = v * np.exp(1j * theta)
        ibus = ybus @ vc
        diag_v = np.diag(vc)
        diag_i = np.diag(ibus)
        diag_vn = np.diag(vc / v)
        ds_dtheta = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
        ds_dv = diag_v @ np.conj(ybus @ diag_vn) + np.conj(diag_i) @ diag_vn

        j11 = ds_dtheta.real[np.ix_(ang_idx, ang_idx)]
        j12 = ds_dv.real[np.ix_(ang_idx, mag_idx)]
        j21 = ds_dtheta.imag[np.ix_(mag_idx, ang_idx)]
        j22 = ds_dv.imag[np.ix_(mag_idx, mag_idx)]
        jac = np.block([[j11, j12], [j21, j22]])

        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"power flow Jacobian singular at iteration {it}") from exc
        theta[ang_idx] += dx[: ang_idx.size]
        v[mag_idx] += dx[ang_idx.size:]
    else:
        raise NonConvergence(
            f"power flow: {max_iter} iterations, mismatch {mismatch:.3e}",
            iterations=max_iter,
            residual=mismatch,
        )

    # Machine injections: net bus injection plus local demand.
    s_calc = _injections(ybus, v, theta)
    p_gen = np.empty(len(case.machines))
    q_gen = np.empty(len(case.machines))
    for k, m in enumerate(case.machines):
        i = idx[m.bus]
        s_extra = extra_injection.get(m.bus, 0) if extra_injection else 0
        s_g = s_calc[i] + demand.get(m.bus, 0) - s_extra
        p_gen[k] = s_g.real
        q_gen[k] = s_g.imag

    theta = theta - theta[slack]
    return PowerFlowSolution(
        v=v, theta=theta, p_gen=p_gen, q_gen=q_gen, mismatch=mismatch, iterations=it
    )
