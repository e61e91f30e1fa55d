"""Nonlinear phasor-dynamics simulation of the multi-machine grid.

Machine model: one-axis flux-decay generator (delta, omega, E'q) with
saliency neglected (x_q = x_d'), first-order static exciter, first-order
governor and steam-chest turbine, and a two-state stabilizer (washout +
lead-lag) acting on speed deviation.  Eight states per machine, packed
block-wise:

    [delta | omega | e_q' | e_fd | p_m | p_gv | pss_1 | pss_2]

Loads are constant-impedance at the power-flow voltage; attacker and
defender power changes enter as constant-power injections re-solved into
the network every evaluation.  Integration is implicit trapezoidal with a
chord-Newton inner loop.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .case import GridCase
from .errors import InfeasibleInit, SingularNetwork, StepDivergence
from .network import PowerFlowSolution, build_ybus

STATE_BLOCKS = (
    "delta",
    "omega",
    "e_q_prime",
    "e_fd",
    "p_m",
    "p_gv",
    "pss_1",
    "pss_2",
    "agc",
)

# Standard stabilizer output clamp (pu on the AVR voltage-error input);
# keeps a sustained common-mode speed excursion from dragging every
# exciter down through the stabilizer path.
PSS_OUTPUT_LIMIT = 0.1

# Beyond this speed excursion the phasor model is meaningless; the run is
# truncated and flagged rather than aborted.
FREQ_DIVERGENCE_HZ = 15.0
OMEGA_VALID = (0.5, 1.5)


@dataclass
class DynamicState:
    """Packed machine states at one instant."""

    x: np.ndarray
    time: float = 0.0

    def block(self, name: str) -> np.ndarray:
        i = STATE_BLOCKS.index(name)
        m = self.x.size // len(STATE_BLOCKS)
        return self.x[i * m : (i + 1) * m]

    @property
    def delta(self):
        return self.block("delta")

    @property
    def omega(self):
        return self.block("omega")

    @property
    def e_q_prime(self):
        return self.block("e_q_prime")

    def copy(self) -> "DynamicState":
        return DynamicState(self.x.copy(), self.time)


@dataclass
class Trajectory:
    """Uniform-grid simulation record.

    All power columns are in MW / MVAr at the bus; frequencies in Hz.
    The grid is truncated at `divergence_time` when `diverged` is set.
    """

    t: np.ndarray
    freq_hz: np.ndarray        # (n, n_machines)
    states: np.ndarray         # (n, n_states)
    v_mag: np.ndarray          # (n, n_buses)
    attack_buses: tuple[int, ...]
    attack_p_mw: np.ndarray
    attack_q_mvar: np.ndarray
    defender_buses: tuple[int, ...]
    defender_p_mw: np.ndarray
    defender_q_mvar: np.ndarray
    machine_buses: tuple[int, ...]
    bus_ids: tuple[int, ...]
    f_nominal: float
    diverged: bool = False
    divergence_time: float | None = None
    telemetry: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def freq_deviation_hz(self) -> np.ndarray:
        return self.freq_hz - self.f_nominal


class InjectionSchedule:
    """Base class for time-indexed or feedback power injections.

    Sign convention: positive megawatts mean added load at the bus (for
    both attacker and defender channels).
    """

    kind = "static"
    buses: tuple[int, ...] = ()
    is_feedback = False

    def validate(self, case: GridCase) -> None:
        known = set(case.bus_ids())
        for b in self.buses:
            if b not in known:
                raise ValueError(f"schedule references unknown bus {b}")

    def value_mw(self, t: float):
        """(dP_MW, dQ_MVAr) arrays aligned with self.buses."""
        raise NotImplementedError

    def make_runtime(self):
        """Stateful per-step evaluator for feedback schedules."""
        raise NotImplementedError


class TimeFunctionSchedule(InjectionSchedule):
    def __init__(self, kind, buses, p_fn, q_fn=None):
        self.kind = kind
        self.buses = tuple(buses)
        self._p_fn = p_fn
        self._q_fn = q_fn

    def value_mw(self, t):
        p = np.asarray(self._p_fn(t), dtype=float)
        q = (
            np.asarray(self._q_fn(t), dtype=float)
            if self._q_fn is not None
            else np.zeros_like(p)
        )
        return p, q


class CompositeSchedule(InjectionSchedule):
    kind = "composite"

    def __init__(self, parts):
        self.parts = list(parts)
        self.buses = tuple(sorted({b for s in self.parts for b in s.buses}))
        self.is_feedback = any(s.is_feedback for s in self.parts)

    def validate(self, case):
        for s in self.parts:
            s.validate(case)


class DynamicModel:
    """Precomputed arrays and network factorization for fast RHS evaluation."""

    def __init__(self, case: GridCase, pf: PowerFlowSolution):
        self.case = case
        self.pf = pf
        idx = case.bus_index()
        self.n_bus = len(case.buses)
        self.n_mach = len(case.machines)
        self.n_states = len(STATE_BLOCKS) * self.n_mach
        self.mach_bus_idx = np.array([idx[m.bus] for m in case.machines])
        self.machine_buses = tuple(m.bus for m in case.machines)
        self.bus_ids = tuple(case.bus_ids())
        self.f_nominal = case.f_nominal
        self.omega_s = 2.0 * np.pi * case.f_nominal

        g = case.machines
        self.h = np.array([m.h for m in g])
        self.d = np.array([m.d for m in g])
        self.xd = np.array([m.x_d for m in g])
        self.xdp = np.array([m.x_d_prime for m in g])
        self.td0p = np.array([m.t_d0_prime for m in g])
        self.ka = np.array([m.exciter.k_a for m in g])
        self.ta = np.array([m.exciter.t_a for m in g])
        self.rd = np.array([m.governor.r_droop for m in g])
        self.tg = np.array([m.governor.t_g for m in g])
        self.tch = np.array([m.turbine.t_ch for m in g])
        self.kpss = np.array([m.pss.k_pss for m in g])
        self.tw = np.array([m.pss.t_w for m in g])
        self.t1 = np.array([m.pss.t_1 for m in g])
        self.t2 = np.array([m.pss.t_2 for m in g])
        self.pss_on = np.array([1.0 if m.pss.enabled else 0.0 for m in g])
        self.k_agc = np.array([m.agc.k_i for m in g])
        self.t_leak = np.array([m.agc.t_leak for m in g])
        self.agc_on = np.array([1.0 if m.agc.enabled else 0.0 for m in g])

        # Loads are held constant-power and re-solved into the network each
        # evaluation (same fixed-point path as the attack/defender
        # injections); a constant-impedance conversion was tried first but
        # its voltage-release masks the governor droop response.
        y_aug = build_ybus(case)
        self.s_demand = np.zeros(self.n_bus, dtype=complex)
        for bid, s in case.demand().items():
            self.s_demand[idx[bid]] -= s  # demand = negative injection
        self.y_m = 1.0 / (1j * self.xdp)
        for k, i in enumerate(self.mach_bus_idx):
            y_aug[i, i] += self.y_m[k]
        self.y_aug = y_aug
        try:
            self._lu = lu_factor(y_aug)
        except Exception as exc:  # pragma: no cover
            raise SingularNetwork("augmented Y-bus factorization failed") from exc

        # Set points are filled in by init_dynamics.
        self.v_ref = np.zeros(self.n_mach)
        self.p_ref = np.zeros(self.n_mach)
        self._v_guess = pf.v * np.exp(1j * pf.theta)
        self._v0 = self._v_guess.copy()

    def reset_network_guess(self) -> None:
        """Restore the power-flow warm start so repeated runs are
        bit-identical regardless of what was solved in between."""
        self._v_guess = self._v0.copy()

    # ---- network --------------------------------------------------------

    def solve_network(self, e_complex: np.ndarray, s_inj: np.ndarray) -> np.ndarray:
        """Bus voltages given machine EMFs and constant-power injections (pu).

        Fixed-point iteration on the injection currents with the factorized
        augmented admittance matrix; direct solve when s_inj is zero.
        """
        i_src = np.zeros(self.n_bus, dtype=complex)
        np.add.at(i_src, self.mach_bus_idx, e_complex * self.y_m)
        s_total = self.s_demand + s_inj
        nz = np.flatnonzero(s_total)
        if nz.size == 0:
            v = lu_solve(self._lu, i_src)
            self._v_guess = v
            return v
        v = self._v_guess.copy()
        damping = 1.0
        for attempt in range(2):
            prev_err = np.inf
            for _ in range(150):
                i_inj = np.zeros(self.n_bus, dtype=complex)
                i_inj[nz] = np.conj(s_total[nz] / v[nz])
                v_new = lu_solve(self._lu, i_src + i_inj)
                if damping != 1.0:
                    v_new = v + damping * (v_new - v)
                err = np.max(np.abs(v_new - v))
                v = v_new
                if err < 1e-14 or (err < 1e-10 and err >= 0.5 * prev_err):
                    # converged, or hit the round-off plateau
                    self._v_guess = v
                    return v
                prev_err = err
                if np.any(np.abs(v) < 1e-2) or not np.all(np.isfinite(v.view(float))):
                    break
            damping = 0.5
            v = self._v_guess.copy()
        return self._newton_network(i_src, s_total)

    def _newton_network(self, i_src: np.ndarray, s_total: np.ndarray) -> np.ndarray:
        """Damped Newton on F(v) = Y v - i_src - conj(s_total / v).

        Fallback for heavy constant-power loading where the fixed point
        stops contracting.  Solved in stacked real variables.
        """
        n = self.n_bus
        v = self._v_guess.copy()

        def f_of(vc):
            return self.y_aug @ vc - i_src - np.conj(s_total / vc)

        fv = f_of(v)
        err = np.max(np.abs(fv))
        for _ in range(40):
            if err < 1e-12:
                self._v_guess = v
                return v
            # d(-conj(s)/conj(v)) / d(vr, vi) with conj(v) = vr - j vi.
            g = np.conj(s_total) / np.conj(v) ** 2
            dfr = self.y_aug + np.diag(g)          # dF/d(vr)
            dfi = 1j * self.y_aug - 1j * np.diag(g)  # dF/d(vi)
            jac = np.block(
                [[dfr.real, dfi.real], [dfr.imag, dfi.imag]]
            )
            try:
                step = np.linalg.solve(jac, np.concatenate([fv.real, fv.imag]))
            except np.linalg.LinAlgError as exc:
                raise SingularNetwork("network Newton Jacobian singular") from exc
            dv = step[:n] + 1j * step[n:]
            lam = 1.0
            for _ in range(20):
                v_try = v - lam * dv
                if np.all(np.abs(v_try) > 1e-3):
                    f_try = f_of(v_try)
                    e_try = np.max(np.abs(f_try))
                    if e_try < err:
                        v, fv, err = v_try, f_try, e_try
                        break
                lam *= 0.5
            else:
                raise SingularNetwork(
                    f"network Newton stalled at residual {err:.2e}"
                )
        raise SingularNetwork("network injection solve did not converge")

    # ---- right-hand side ------------------------------------------------

    def rhs(self, x: np.ndarray, s_inj: np.ndarray) -> np.ndarray:
        m = self.n_mach
        delta = x[0:m]
        omega = x[m : 2 * m]
        eqp = x[2 * m : 3 * m]
        efd = x[3 * m : 4 * m]
        pm = x[4 * m : 5 * m]
        pgv = x[5 * m : 6 * m]
        s1 = x[6 * m : 7 * m]
        s2 = x[7 * m : 8 * m]
        z_agc = x[8 * m : 9 * m]

        e_complex = eqp * np.exp(1j * delta)
        v = self.solve_network(e_complex, s_inj)
        v_t = v[self.mach_bus_idx]
        i_mach = (e_complex - v_t) * self.y_m
        idq = 1j * i_mach * np.exp(-1j * delta)
        i_d = idq.real
        i_q = idq.imag
        te = eqp * i_q
        vt = np.abs(v_t)

        dw = omega - 1.0
        u_w = self.kpss * dw
        v_w = u_w - s1
        v_pss = self.pss_on * np.clip(
            s2 + (self.t1 / self.t2) * (v_w - s2),
            -PSS_OUTPUT_LIMIT,
            PSS_OUTPUT_LIMIT,
        )

        dx = np.empty_like(x)
        dx[0:m] = self.omega_s * dw
        dx[m : 2 * m] = (pm - te - self.d * dw) / (2.0 * self.h)
        dx[2 * m : 3 * m] = (efd - eqp - (self.xd - self.xdp) * i_d) / self.td0p
        dx[3 * m : 4 * m] = (self.ka * (self.v_ref - vt + v_pss) - efd) / self.ta
        dx[4 * m : 5 * m] = (pgv - pm) / self.tch
        dx[5 * m : 6 * m] = (
            self.p_ref + self.agc_on * z_agc - dw / self.rd - pgv
        ) / self.tg
        dx[6 * m : 7 * m] = (u_w - s1) / self.tw
        dx[7 * m : 8 * m] = (v_w - s2) / self.t2
        dx[8 * m : 9 * m] = -self.agc_on * self.k_agc * dw - z_agc / self.t_leak
        return dx

    def bus_voltages(self, x: np.ndarray, s_inj: np.ndarray) -> np.ndarray:
        m = self.n_mach
        e_complex = x[2 * m : 3 * m] * np.exp(1j * x[0:m])
        return self.solve_network(e_complex, s_inj)

    def freq_hz(self, x: np.ndarray) -> np.ndarray:
        m = self.n_mach
        return self.f_nominal * x[m : 2 * m]

    # ---- Jacobians (finite differences, network re-solved) --------------

    def state_jacobian(self, x: np.ndarray, s_inj=None, eps: float = 1e-6) -> np.ndarray:
        if s_inj is None:
            s_inj = np.zeros(self.n_bus, dtype=complex)
        n = self.n_states
        a = np.empty((n, n))
        for j in range(n):
            step = eps * max(1.0, abs(x[j]))
            xp = x.copy()
            xp[j] += step
            xm = x.copy()
            xm[j] -= step
            a[:, j] = (self.rhs(xp, s_inj) - self.rhs(xm, s_inj)) / (2.0 * step)
        return a

    def injection_jacobian(self, x: np.ndarray, bus_ids, eps: float = 1e-5) -> np.ndarray:
        """Columns d(rhs)/d(dP), d(rhs)/d(dQ) per listed bus.

        Channel unit: one pu of added load on the system base (positive load
        means negative net injection).
        """
        idx = self.case.bus_index()
        cols = []
        for bid in bus_ids:
            i = idx[bid]
            for part in (1.0, 1j):
                s = np.zeros(self.n_bus, dtype=complex)
                s[i] = -part * eps  # added load = negative injection
                fp = self.rhs(x, s)
                fm = self.rhs(x, -s)
                cols.append((fp - fm) / (2.0 * eps))
        return np.column_stack(cols)


# ---- initialization ----------------------------------------------------


def init_dynamics(
    case: GridCase,
    pf: PowerFlowSolution,
    strict: bool = True,
    mismatch_limit: float = 1e-6,
) -> tuple[DynamicModel, DynamicState]:
    """Consistent machine initialization at the power-flow operating point.

    Returns the evaluation model (with exciter/governor references filled
    in) and the equilibrium state.  With strict=True a sloppy power flow or
    a residual above 1e-8 raises InfeasibleInit.
    """
    if pf.mismatch > mismatch_limit:
        msg = f"power flow mismatch {pf.mismatch:.2e} exceeds {mismatch_limit:.0e}"
        if strict:
            raise InfeasibleInit(msg)
        warnings.warn(msg, stacklevel=2)

    model = DynamicModel(case, pf)
    idx = case.bus_index()
    vb = pf.v * np.exp(1j * pf.theta)
    v_t = vb[model.mach_bus_idx]
    s_g = pf.p_gen + 1j * pf.q_gen
    with np.errstate(divide="raise", invalid="raise"):
        try:
            i_g = np.conj(s_g / v_t)
        except FloatingPointError as exc:
            raise InfeasibleInit("zero terminal voltage at a machine bus") from exc

    e = v_t + 1j * model.xdp * i_g
    delta = np.angle(e)
    eqp = np.abs(e)
    if np.any(eqp <= 0):
        raise InfeasibleInit("vanishing internal EMF")
    idq = 1j * i_g * np.exp(-1j * delta)
    i_d = idq.real
    i_q = idq.imag
    efd = eqp + (model.xd - model.xdp) * i_d
    te = eqp * i_q

    vt_mag = np.abs(v_t)
    declared = np.array(
        [m.exciter.v_ref if m.exciter.v_ref is not None else np.nan for m in case.machines]
    )
    derived = vt_mag + efd / model.ka
    model.v_ref = np.where(np.isnan(declared), derived, declared)
    model.p_ref = te.copy()

    m = model.n_mach
    x = np.zeros(model.n_states)
    x[0:m] = delta
    x[m : 2 * m] = 1.0
    x[2 * m : 3 * m] = eqp
    x[3 * m : 4 * m] = efd
    x[4 * m : 5 * m] = te
    x[5 * m : 6 * m] = te
    # pss_1, pss_2 stay at zero (zero speed deviation).

    resid = np.max(np.abs(model.rhs(x, np.zeros(model.n_bus, dtype=complex))))
    if strict and resid > 1e-8:
        raise InfeasibleInit(f"initial derivative norm {resid:.2e} exceeds 1e-8")
    return model, DynamicState(x=x, time=0.0)


# ---- simulation ---------------------------------------------------------


def _resolve_schedules(model, schedules):
    idx = model.case.bus_index()
    flat = []

    def expand(s):
        if isinstance(s, CompositeSchedule):
            for p in s.parts:
                expand(p)
        else:
            flat.append(s)

    for s in schedules:
        expand(s)

    timed, feedback = [], []
    for s in flat:
        s.validate(model.case)
        rows = np.array([idx[b] for b in s.buses], dtype=int)
        if s.is_feedback:
            feedback.append((s, rows, s.make_runtime()))
        else:
            timed.append((s, rows))
    return timed, feedback


def simulate(
    case: GridCase,
    model: DynamicModel,
    state0: DynamicState,
    schedules=(),
    t_end: float = 10.0,
    dt: float = 2e-3,
    controller=None,
    record_every: int = 1,
    newton_tol: float = 1e-10,
    max_newton: int = 12,
) -> Trajectory:
    """Implicit-trapezoidal run with scheduled and feedback injections.

    `controller`, when given, is called once per step as
    ``controller(t, f_hz, dt) -> dict bus_id -> (dP_MW, dQ_MVAr)`` and sees
    only measured machine frequencies; its output is held over the step and
    logged as the defender injection.
    """
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be > 0")
    model.reset_network_guess()
    timed, feedback = _resolve_schedules(model, schedules)

    idx = case.bus_index()
    base = case.base_mva
    n_steps = int(round(t_end / dt))
    n_rec = n_steps // record_every + 1

    att_buses = tuple(
        sorted(
            set(case.attack_buses)
            | {b for s, _ in timed if s.kind != "defender" for b in s.buses}
            | {b for s, _, _ in feedback for b in s.buses}
        )
    )
    ev_buses = tuple(case.ev_buses)
    att_rows = np.array([idx[b] for b in att_buses], dtype=int)
    ev_rows = np.array([idx[b] for b in ev_buses], dtype=int)

    t_grid = np.empty(n_rec)
    freq = np.empty((n_rec, model.n_mach))
    states = np.empty((n_rec, model.n_states))
    vmag = np.empty((n_rec, model.n_bus))
    att_p = np.zeros((n_rec, len(att_buses)))
    att_q = np.zeros((n_rec, len(att_buses)))
    def_p = np.zeros((n_rec, len(ev_buses)))
    def_q = np.zeros((n_rec, len(ev_buses)))

    x = state0.x.copy()
    t = state0.time
    a_chord = model.state_jacobian(x)
    ident = np.eye(model.n_states)
    chord_lu = lu_factor(ident - 0.5 * dt * a_chord)

    def assemble_timed(tq):
        """Complex pu bus injections from time-function schedules at tq."""
        s = np.zeros(model.n_bus, dtype=complex)
        ap = np.zeros(len(att_buses))
        aq = np.zeros(len(att_buses))
        for sch, rows in timed:
            p_mw, q_mvar = sch.value_mw(tq)
            s[rows] -= (p_mw + 1j * q_mvar) / base
            if sch.kind in ("static", "switching"):
                for k, b in enumerate(sch.buses):
                    j = att_buses.index(b)
                    ap[j] += p_mw[k]
                    aq[j] += q_mvar[k]
        return s, ap, aq

    diverged = False
    t_div = None
    rec = 0

    s_fb = np.zeros(model.n_bus, dtype=complex)  # held feedback injections
    fb_att_p = np.zeros(len(att_buses))
    fb_att_q = np.zeros(len(att_buses))
    s_def = np.zeros(model.n_bus, dtype=complex)
    def_p_now = np.zeros(len(ev_buses))
    def_q_now = np.zeros(len(ev_buses))

    s_t0, ap0, aq0 = assemble_timed(t)

    def record(k, s_total, ap, aq):
        t_grid[k] = t
        freq[k] = model.freq_hz(x)
        states[k] = x
        vmag[k] = np.abs(model.bus_voltages(x, s_total))
        att_p[k] = ap
        att_q[k] = aq
        def_p[k] = def_p_now
        def_q[k] = def_q_now

    record(0, s_t0 + s_fb + s_def, ap0 + fb_att_p, aq0 + fb_att_q)
    rec = 1

    for step in range(1, n_steps + 1):
        y_hz = model.freq_hz(x)

        # Feedback schedules (attacker side) and defender hook, held per step.
        if feedback:
            s_fb[:] = 0.0
            fb_att_p[:] = 0.0
            fb_att_q[:] = 0.0
            for sch, rows, rt in feedback:
                p_mw, q_mvar = rt.step(t, y_hz, dt)
                s_fb[rows] -= (np.asarray(p_mw) + 1j * np.asarray(q_mvar)) / base
                for k, b in enumerate(sch.buses):
                    j = att_buses.index(b)
                    fb_att_p[j] += p_mw[k]
                    fb_att_q[j] += q_mvar[k]
        if controller is not None:
            cmd = controller(t, y_hz, dt)
            s_def[:] = 0.0
            def_p_now[:] = 0.0
            def_q_now[:] = 0.0
            if cmd:
                for bid, (dp_mw, dq_mvar) in cmd.items():
                    s_def[idx[bid]] -= complex(dp_mw, dq_mvar) / base
                    j = ev_buses.index(bid)
                    def_p_now[j] = dp_mw
                    def_q_now[j] = dq_mvar

        t1 = t + dt
        s_t1, ap1, aq1 = assemble_timed(t1)
        inj0 = s_t0 + s_fb + s_def
        inj1 = s_t1 + s_fb + s_def

        try:
            f0 = model.rhs(x, inj0)
            x1 = x + dt * f0  # predictor
            converged = False
            for attempt in range(2):
                for _ in range(max_newton):
                    g = x1 - x - 0.5 * dt * (f0 + model.rhs(x1, inj1))
                    if np.max(np.abs(g)) < newton_tol * max(1.0, np.max(np.abs(x1))):
                        converged = True
                        break
                    x1 = x1 - lu_solve(chord_lu, g)
                if converged:
                    break
                # Refresh the chord Jacobian at the current state and retry.
                a_chord = model.state_jacobian(x, inj0)
                chord_lu = lu_factor(ident - 0.5 * dt * a_chord)
                x1 = x + dt * f0
            if not converged:
                raise StepDivergence(f"implicit step Newton failed at t={t1:.4f}s")
        except (StepDivergence, SingularNetwork):
            if np.max(np.abs(model.freq_hz(x) - case.f_nominal)) > 0.5:
                diverged = True
                t_div = t
                break
            raise

        x = x1
        t = t1
        s_t0, ap0, aq0 = s_t1, ap1, aq1

        if np.max(np.abs(model.freq_hz(x) - case.f_nominal)) > FREQ_DIVERGENCE_HZ or not np.all(
            np.isfinite(x)
        ):
            diverged = True
            t_div = t
            if step % record_every == 0 and np.all(np.isfinite(x)):
                record(rec, inj1, ap1 + fb_att_p, aq1 + fb_att_q)
                rec += 1
            break

        if step % record_every == 0:
            record(rec, inj1, ap1 + fb_att_p, aq1 + fb_att_q)
            rec += 1

    sl = slice(0, rec)
    return Trajectory(
        t=t_grid[sl].copy(),
        freq_hz=freq[sl].copy(),
        states=states[sl].copy(),
        v_mag=vmag[sl].copy(),
        attack_buses=att_buses,
        attack_p_mw=att_p[sl].copy(),
        attack_q_mvar=att_q[sl].copy(),
        defender_buses=ev_buses,
        defender_p_mw=def_p[sl].copy(),
        defender_q_mvar=def_q[sl].copy(),
        machine_buses=model.machine_buses,
        bus_ids=model.bus_ids,
        f_nominal=case.f_nominal,
        diverged=diverged,
        divergence_time=t_div,
    )


# ---- trajectory CSV -----------------------------------------------------

TRAJECTORY_SCHEMA = "trajectory-1"


def _state_labels(machine_buses) -> list[str]:
    return [f"{blk}@{b}" for blk in STATE_BLOCKS for b in machine_buses]


def serialize_trajectory_csv(traj: Trajectory) -> str:
    """Full-precision CSV export (schema docs/trajectory-csv.md).

    Metadata rides in leading '#' lines; every float is written with 17
    significant digits so a re-parse is bit-exact.  Controller telemetry,
    when attached under the 'xhat_norm'/'saturated'/'delay_ms' keys of
    traj.telemetry (resampled onto the record grid), is appended as extra
    columns.
    """
    cols: list[tuple[str, np.ndarray]] = [("t", traj.t)]
    cols += [(f"f@{b}", traj.freq_hz[:, j]) for j, b in enumerate(traj.machine_buses)]
    cols += [(lbl, traj.states[:, j]) for j, lbl in enumerate(_state_labels(traj.machine_buses))]
    cols += [(f"v@{b}", traj.v_mag[:, j]) for j, b in enumerate(traj.bus_ids)]
    cols += [(f"att_p@{b}", traj.attack_p_mw[:, j]) for j, b in enumerate(traj.attack_buses)]
    cols += [(f"att_q@{b}", traj.attack_q_mvar[:, j]) for j, b in enumerate(traj.attack_buses)]
    cols += [(f"def_p@{b}", traj.defender_p_mw[:, j]) for j, b in enumerate(traj.defender_buses)]
    cols += [(f"def_q@{b}", traj.defender_q_mvar[:, j]) for j, b in enumerate(traj.defender_buses)]
    for key in ("xhat_norm", "saturated", "delay_ms"):
        if key in traj.telemetry:
            arr = np.asarray(traj.telemetry[key], dtype=float)
            if arr.shape == traj.t.shape:
                cols.append((key, arr))

    lines = [
        f"# schema {TRAJECTORY_SCHEMA}",
        f"# f_nominal {traj.f_nominal!r}",
        "# machine_buses " + " ".join(str(b) for b in traj.machine_buses),
        "# bus_ids " + " ".join(str(b) for b in traj.bus_ids),
        "# attack_buses " + " ".join(str(b) for b in traj.attack_buses),
        "# defender_buses " + " ".join(str(b) for b in traj.defender_buses),
        f"# diverged {int(traj.diverged)}",
        f"# divergence_time {traj.divergence_time!r}",
        ",".join(name for name, _ in cols),
    ]
    data = np.column_stack([arr for _, arr in cols])
    for row in data:
        lines.append(",".join(f"{v:.17e}" for v in row))
    return "\n".join(lines) + "\n"


def parse_trajectory_csv(text: str) -> Trajectory:
    meta: dict[str, str] = {}
    header = None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition(" ")
            meta[key] = val
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise ValueError("trajectory CSV has no header row")
    if meta.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unsupported trajectory schema {meta.get('schema')!r}")
    data = np.asarray(rows, dtype=float)
    col = {name: data[:, j] for j, name in enumerate(header)}

    def ids(key):
        return tuple(int(v) for v in meta.get(key, "").split())

    machine_buses = ids("machine_buses")
    bus_ids = ids("bus_ids")
    attack_buses = ids("attack_buses")
    defender_buses = ids("defender_buses")
    slabels = _state_labels(machine_buses)
    telemetry = {
        key: col[key] for key in ("xhat_norm", "saturated", "delay_ms") if key in col
    }
    div_time = meta.get("divergence_time", "None")
    return Trajectory(
        t=col["t"],
        freq_hz=np.column_stack([col[f"f@{b}"] for b in machine_buses]),
        states=np.column_stack([col[lbl] for lbl in slabels]),
        v_mag=np.column_stack([col[f"v@{b}"] for b in bus_ids]),
        attack_buses=attack_buses,
        attack_p_mw=np.column_stack([col[f"att_p@{b}"] for b in attack_buses])
        if attack_buses
        else np.zeros((data.shape[0], 0)),
        attack_q_mvar=np.column_stack([col[f"att_q@{b}"] for b in attack_buses])
        if attack_buses
        else np.zeros((data.shape[0], 0)),
        defender_buses=defender_buses,
        defender_p_mw=np.column_stack([col[f"def_p@{b}"] for b in defender_buses])
        if defender_buses
        else np.zeros((data.shape[0], 0)),
        defender_q_mvar=np.column_stack([col[f"def_q@{b}"] for b in defender_buses])
        if defender_buses
        else np.zeros((data.shape[0], 0)),
        machine_buses=machine_buses,
        bus_ids=bus_ids,
        f_nominal=float(meta["f_nominal"]),
        diverged=bool(int(meta.get("diverged", "0"))),
        divergence_time=None if div_time == "None" else float(div_time),
        telemetry=telemetry,
    )
