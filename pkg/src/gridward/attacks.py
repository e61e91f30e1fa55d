"""Load-altering attack generation.

Three classes: a sustained static step, a square-wave switching attack
tuned to a grid oscillatory mode, and a dynamic feedback attacker that
shifts a target mode into the right half plane.  All schedules respect
0 <= dP_bus(t) <= fraction * total_mw and touch only the active-power
channel of attack buses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .case import GridCase
from .dynamics import InjectionSchedule, TimeFunctionSchedule
from .errors import NoOscillatoryMode, TargetModeUncontrollable
from .linearize import StateSpaceModel
from .synth import observer_gain, solve_care

MODE_BAND_HZ = (0.05, 5.0)


@dataclass(frozen=True)
class TargetMode:
    freq_hz: float
    damping_ratio: float
    eigenvalue: complex


def identify_target_mode(
    ssm: StateSpaceModel, band_hz: tuple[float, float] = MODE_BAND_HZ
) -> TargetMode:
    """Least-damped oscillatory mode of the model inside the band."""
    ev = ssm.eigenvalues()
    lo, hi = band_hz
    best = None
    for lam in ev:
        if lam.imag <= 0:  # one representative per conjugate pair
            continue
        f = lam.imag / (2.0 * np.pi)
        if not (lo < f < hi):
            continue
        zeta = -lam.real / abs(lam)
        if best is None or zeta < best[0]:
            best = (zeta, f, lam)
    if best is None:
        raise NoOscillatoryMode(
            f"no complex mode in the {lo}-{hi} Hz band (spectrum may be real)"
        )
    zeta, f, lam = best
    return TargetMode(freq_hz=float(f), damping_ratio=float(zeta), eigenvalue=complex(lam))


@dataclass(frozen=True)
class AttackSpec:
    kind: str                      # static | switching | dynamic
    total_mw: float
    buses: tuple[int, ...]
    fractions: tuple[float, ...] = ()
    t_start: float = 5.0
    freq_hz: float | None = None   # switching
    duty: float = 0.5              # switching
    sigma_target: float = 0.2      # dynamic: target Re(lambda), 1/s
    gain_scale: float = 2.0        # dynamic: compensates the one-sided clamp
    kick_mw: float | None = None   # dynamic: startup excitation, default 5%
    kick_duration: float = 0.25    # dynamic: s

    def __post_init__(self):
        if self.kind not in ("static", "switching", "dynamic"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.total_mw < 0:
            raise ValueError("total_mw must be >= 0")
        if not self.buses:
            raise ValueError("attack needs at least one target bus")
        if not self.fractions:
            object.__setattr__(
                self, "fractions", tuple(1.0 / len(self.buses) for _ in self.buses)
            )
        if len(self.fractions) != len(self.buses):
            raise ValueError("fractions must align with buses")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if any(f < 0 for f in self.fractions):
            raise ValueError("split fractions must be >= 0")
        if self.kind == "switching":
            # freq_hz None means "resolve from the identified target mode"
            # before schedule construction.
            if self.freq_hz is not None and self.freq_hz <= 0:
                raise ValueError("switching attack needs freq_hz > 0")
            if not (0.0 < self.duty < 1.0):
                raise ValueError("duty must be in (0, 1)")

    @property
    def per_bus_mw(self) -> np.ndarray:
        return self.total_mw * np.asarray(self.fractions)


class AttackSchedule(TimeFunctionSchedule):
    """Timed attack injection; validates bus membership against the case."""

    def validate(self, case: GridCase) -> None:
        super().validate(case)
        allowed = set(case.attack_buses)
        for b in self.buses:
            if b not in allowed:
                raise ValueError(f"bus {b} is not an attack bus of the case")


def static_attack(spec: AttackSpec) -> InjectionSchedule:
    """Per-bus dP steps from 0 to fraction*total_mw at t_start, sustained."""
    if spec.kind != "static":
        raise ValueError("spec.kind must be 'static'")
    cap = spec.per_bus_mw
    t0 = spec.t_start
    return AttackSchedule(
        "static", spec.buses, lambda t: cap if t >= t0 else np.zeros_like(cap)
    )


def switching_attack(spec: AttackSpec) -> InjectionSchedule:
    """Square wave between 0 and fraction*total_mw at freq_hz with duty."""
    if spec.kind != "switching":
        raise ValueError("spec.kind must be 'switching'")
    if spec.freq_hz is None:
        raise ValueError(
            "switching frequency unresolved; identify the target mode first"
        )
    cap = spec.per_bus_mw
    t0 = spec.t_start
    f = float(spec.freq_hz)
    duty = spec.duty

    def p_fn(t):
        if t < t0:
            return np.zeros_like(cap)
        phase = ((t - t0) * f) % 1.0
        return cap if phase < duty else np.zeros_like(cap)

    return AttackSchedule("switching", spec.buses, p_fn)


# ---- dynamic (feedback) attacker ----------------------------------------


def _attack_input_columns(ssm: StateSpaceModel, buses) -> np.ndarray:
    cols = []
    for b in buses:
        label = f"dP@{b}"
        if label not in ssm.disturbance_labels:
            raise ValueError(f"model has no disturbance channel {label}")
        cols.append(ssm.disturbance_labels.index(label))
    return ssm.b_d[:, cols]


def design_attack_gain(
    ssm: StateSpaceModel,
    buses,
    sigma_target: float = 0.2,
    max_iter: int = 400,
    step: float = 0.05,
) -> tuple[np.ndarray, TargetMode]:
    """Feedback gain pushing the least-damped oscillatory pair to
    Re(lambda) = +sigma_target.

    Iterative first-order modal shifting: each pass nudges the tracked
    eigenvalue along the real axis using the mode's left/right
    eigenvectors and the attack input directions.
    """
    b_att = _attack_input_columns(ssm, buses)
    mode = identify_target_mode(ssm)
    a = ssm.a
    n = a.shape[0]
    k = np.zeros((b_att.shape[1], n))
    lam_prev = mode.eigenvalue

    def tracked(kmat):
        ev, vr = np.linalg.eig(a + b_att @ kmat)
        i = int(np.argmin(np.abs(ev - lam_prev)))
        return ev[i], vr[:, i]

    alpha = step
    for _ in range(max_iter):
        lam, v = tracked(k)
        if lam.real >= sigma_target:
            return k, mode
        # Left eigenvector u of the tracked mode: u^T A_cl = lam u^T.
        evl, vl = np.linalg.eig((a + b_att @ k).T)
        u = vl[:, int(np.argmin(np.abs(evl - lam)))]
        s = u @ v
        if abs(s) < 1e-12:
            raise TargetModeUncontrollable("degenerate eigenvector pairing")
        # d(lam)/dK = outer(u^T B, v) / (u^T v); ascend its real part.
        grad = np.real(np.outer(u @ b_att, v) / s)
        gn = np.linalg.norm(grad)
        if gn < 1e-10:
            raise TargetModeUncontrollable(
                f"mode at {lam.imag / (2 * np.pi):.3f} Hz is not reachable "
                "from the attack buses"
            )
        moved = False
        while alpha > 1e-8:
            lam_try, _ = tracked(k + alpha * grad / gn)
            if lam_try.real > lam.real:
                k = k + alpha * grad / gn
                lam_prev = lam_try
                moved = True
                if alpha < step:
                    alpha *= 2.0
                break
            alpha *= 0.5
        if not moved:
            break
    raise TargetModeUncontrollable(
        f"modal shifting stalled at Re = {lam_prev.real:.3f} "
        f"(target {sigma_target})"
    )


class _DynamicAttackRuntime:
    """Attacker-side observer + clamped feedback, stepped by the simulator."""

    def __init__(self, sched: "DynamicAttackSchedule"):
        self.s = sched
        self.x_hat = np.zeros(sched.ssm.order)
        self._disc: tuple[float, np.ndarray, np.ndarray, np.ndarray] | None = None

    def _discretize(self, dt: float):
        if self._disc is not None and self._disc[0] == dt:
            return self._disc[1:]
        s = self.s
        a_obs = s.ssm.a - s.l_corr @ s.ssm.c
        n = a_obs.shape[0]
        b_aug = np.hstack([s.b_att, s.l_corr])
        m = np.zeros((n + b_aug.shape[1],) * 2)
        m[:n, :n] = a_obs
        m[:n, n:] = b_aug
        em = expm(m * dt)
        ad = em[:n, :n]
        bd = em[:n, n : n + s.b_att.shape[1]]
        ld = em[:n, n + s.b_att.shape[1] :]
        self._disc = (dt, ad, bd, ld)
        return ad, bd, ld

    def step(self, t: float, y_hz: np.ndarray, dt: float):
        s = self.s
        q = np.zeros(len(s.buses))
        if t < s.t_start:
            return np.zeros(len(s.buses)), q
        p = np.clip(s.k_att @ self.x_hat * s.base_mva, 0.0, s.cap_mw)
        if t < s.t_start + s.kick_duration:
            p = np.clip(p + s.kick_mw * np.asarray(s.fractions), 0.0, s.cap_mw)
        ad, bd, ld = self._discretize(dt)
        y_dev = np.asarray(y_hz) - s.f_nominal
        self.x_hat = ad @ self.x_hat + bd @ (p / s.base_mva) + ld @ y_dev
        return p, q


class DynamicAttackSchedule(InjectionSchedule):
    kind = "dynamic"
    is_feedback = True

    def __init__(self, ssm, spec, k_att, l_corr, b_att, base_mva, f_nominal):
        self.ssm = ssm
        self.buses = tuple(spec.buses)
        self.fractions = tuple(spec.fractions)
        self.cap_mw = spec.per_bus_mw
        self.t_start = spec.t_start
        kick = spec.kick_mw if spec.kick_mw is not None else 0.05 * spec.total_mw
        self.kick_mw = float(kick)
        self.kick_duration = spec.kick_duration
        self.k_att = k_att
        self.l_corr = l_corr
        self.b_att = b_att
        self.base_mva = base_mva
        self.f_nominal = f_nominal

    def validate(self, case: GridCase) -> None:
        super().validate(case)
        allowed = set(case.attack_buses)
        for b in self.buses:
            if b not in allowed:
                raise ValueError(f"bus {b} is not an attack bus of the case")

    def make_runtime(self):
        return _DynamicAttackRuntime(self)


def dynamic_attack(
    ssm_attacker_view: StateSpaceModel,
    spec: AttackSpec,
    base_mva: float = 100.0,
    f_nominal: float = 60.0,
) -> DynamicAttackSchedule:
    """Observer-driven destabilizing feedback attack.

    The runtime applies per-bus dP = clamp(K_att x_hat, 0, fraction *
    total_mw); a brief startup pulse (kick) provides the initial
    excitation the pure feedback law lacks at equilibrium.
    """
    if spec.kind != "dynamic":
        raise ValueError("spec.kind must be 'dynamic'")
    ssm = ssm_attacker_view
    k_att, _ = design_attack_gain(ssm, spec.buses, sigma_target=spec.sigma_target)
    # The clamp at zero half-wave rectifies the feedback, which roughly
    # halves the effective small-signal loop gain; overdesign to keep the
    # realized oscillation growing.
    k_att = spec.gain_scale * k_att
    b_att = _attack_input_columns(ssm, spec.buses)
    # Attacker-side observer on measured frequencies (LQR duals).
    s = solve_care(ssm.a.T, ssm.c.T, np.eye(ssm.order), np.eye(ssm.c.shape[0]))
    l_corr = -observer_gain(s, ssm.c.T, np.eye(ssm.c.shape[0]))
    return DynamicAttackSchedule(ssm, spec, k_att, l_corr, b_att, base_mva, f_nominal)


def perturbed_attacker_model(
    ssm: StateSpaceModel, noise_fraction: float = 0.1, seed: int = 0
) -> StateSpaceModel:
    """Attacker's imperfect copy: +/- noise_fraction multiplicative noise."""
    rng = np.random.default_rng(seed)

    def jitter(m):
        return m * (1.0 + noise_fraction * rng.uniform(-1.0, 1.0, size=m.shape))

    return StateSpaceModel(
        a=jitter(ssm.a),
        b=jitter(ssm.b),
        b_d=jitter(ssm.b_d),
        c=ssm.c.copy(),
        d=ssm.d.copy(),
        d_d=ssm.d_d.copy(),
        state_labels=ssm.state_labels,
        input_labels=ssm.input_labels,
        disturbance_labels=ssm.disturbance_labels,
        output_labels=ssm.output_labels,
        operating_point=ssm.operating_point + f" [attacker noise {noise_fraction}]",
    )
