"""Defender runtime and fleet economics.

The controller closes the loop measured frequencies -> reduced-order
state estimate -> EV power commands, sampled at a fixed period, with
optional per-channel measurement delays, per-bus capacity saturation
(anti-windup: the estimator propagates the clamped command), and a
no-V2G mode restricted to charging reduction.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy.linalg import expm

from .case import GridCase
from .synth import SynthesisArtifacts

SAMPLE_PERIOD_DEFAULT = 0.01     # s
DELAY_MEAN = 0.005               # s
DELAY_SIGMA = 0.0025             # s
DELAY_CLIP = (0.0, 0.010)        # s


# ---- fleet economics ----------------------------------------------------


@dataclass(frozen=True)
class FleetModel:
    vehicles_registered: int = 5_155_681
    ev_penetration: float = 0.5
    public_evcs_per_ev: float = 0.1
    occupancy: float = 0.31
    avg_rate_kw: float = 24.0
    kwh_per_mile: float = 0.2
    tariff_per_hour: float = 7.53  # CAD

    def __post_init__(self):
        for name in ("ev_penetration", "public_evcs_per_ev", "occupancy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.avg_rate_kw <= 0 or self.kwh_per_mile <= 0:
            raise ValueError("rates must be positive")


def fleet_capacity(fm: FleetModel, grid_load_mw: float | None = None) -> dict:
    """Fleet sizing chain: registered vehicles -> EVs -> public EVCSs ->
    connected EVs -> aggregate MW.

    Counts round the way the source figures do: EV and EVCS counts round
    up to whole units, the connected count to the nearest thousand.
    """
    evs = math.ceil(fm.vehicles_registered * fm.ev_penetration)
    public_evcs = math.ceil(evs * fm.public_evcs_per_ev)
    connected = int(round(public_evcs * fm.occupancy / 1000.0) * 1000)
    capacity_mw = connected * fm.avg_rate_kw / 1000.0
    out = {
        "evs": evs,
        "public_evcs": public_evcs,
        "connected_evs": connected,
        "capacity_mw": capacity_mw,
    }
    if grid_load_mw is not None and grid_load_mw > 0:
        out["capacity_fraction_of_load"] = capacity_mw / grid_load_mw
    return out


def energy_impact(times_s, per_ev_kw, fm: FleetModel) -> dict:
    """Per-EV energy bookkeeping over one mitigation event.

    net: energy actually exported/forgone along the commanded trajectory;
    opportunity: charging the EV would have received over the time it was
    engaged; range: the combined loss in miles.
    """
    t = np.asarray(times_s, dtype=float)
    p = np.asarray(per_ev_kw, dtype=float)
    if t.shape != p.shape:
        raise ValueError("times and power trajectories must align")
    active = np.abs(p) > 0
    if t.size < 2 or not np.any(active):
        return {
            "net_kwh_per_ev": 0.0,
            "opportunity_kwh_per_ev": 0.0,
            "range_miles_per_ev": 0.0,
        }
    net_kwh = float(np.trapezoid(np.abs(p), t)) / 3600.0
    duration = float(t[active][-1] - t[active][0])
    opportunity_kwh = fm.avg_rate_kw * duration / 3600.0
    total = net_kwh + opportunity_kwh
    return {
        "net_kwh_per_ev": net_kwh,
        "opportunity_kwh_per_ev": opportunity_kwh,
        "range_miles_per_ev": total / fm.kwh_per_mile,
    }


def event_cost(duration_s: float, fm: FleetModel, participating_evs: int) -> dict:
    """Tariff cost of one event; per-EV amount rounded to 0.0001 CAD
    (half-up) before totalling, the total to whole cents."""
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    per_ev = (
        Decimal(str(fm.tariff_per_hour))
        * Decimal(str(duration_s))
        / Decimal(3600)
    ).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)
    total = (per_ev * participating_evs).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return {"per_ev_cost": float(per_ev), "total_cost": float(total)}


# ---- controller runtime -------------------------------------------------


@dataclass
class DelayModel:
    enabled: bool = False
    mean_s: float = DELAY_MEAN
    sigma_s: float = DELAY_SIGMA
    clip_s: tuple[float, float] = DELAY_CLIP
    seed: int = 0

    def sampler(self):
        rng = np.random.default_rng(self.seed)

        def draw(n):
            return np.clip(
                rng.normal(self.mean_s, self.sigma_s, size=n), *self.clip_s
            )

        return draw


class ControllerRuntime:
    """Sampled observer-based EV feedback controller.

    Called by the simulator every integration step; acts every
    sample_period, holding its command in between.  The estimate is
    propagated with the reduced model discretized exactly over the
    sample period, corrected with (possibly delayed) measured
    frequencies, and driven by the clamped command (anti-windup).
    """

    def __init__(
        self,
        artifacts: SynthesisArtifacts,
        buses: tuple[int, ...],
        cap_p_mw: np.ndarray,
        cap_q_mvar: np.ndarray | None = None,
        v2g_enabled: bool = True,
        delay: DelayModel | None = None,
        sample_period: float = SAMPLE_PERIOD_DEFAULT,
        base_mva: float = 100.0,
        f_nominal: float = 60.0,
    ):
        red = artifacts.reduced.ssm
        self.a_r = red.a
        self.b_r = red.b
        self.c_r = red.c
        self.k_mit = artifacts.hinf.k_mit
        self.l = artifacts.observer.l
        self.l_corr = artifacts.observer.correction_gain
        self.buses = tuple(buses)
        self.input_labels = red.input_labels
        self.cap_p_mw = np.asarray(cap_p_mw, dtype=float)
        self.cap_q_mvar = (
            self.cap_p_mw.copy() if cap_q_mvar is None else np.asarray(cap_q_mvar, float)
        )
        if self.cap_p_mw.shape != (len(self.buses),):
            raise ValueError("cap_p_mw must align with buses")
        self.v2g_enabled = v2g_enabled
        self.delay = delay or DelayModel()
        self._draw_delay = self.delay.sampler()
        self.sample_period = float(sample_period)
        self.base_mva = base_mva
        self.f_nominal = f_nominal

        # Map the gain's input channels onto commanded buses.
        self._p_rows = []
        self._q_rows = []
        for b in self.buses:
            self._p_rows.append(red.input_labels.index(f"dP@{b}"))
            self._q_rows.append(red.input_labels.index(f"dQ@{b}"))

        n = red.order
        self.x_hat = np.zeros(n)
        self._u_pu = np.zeros(self.b_r.shape[1])
        self._cmd: dict[int, tuple[float, float]] = {}
        self._next_sample = None
        self._history: deque[tuple[float, np.ndarray]] = deque(maxlen=64)
        self.telemetry = {
            "t": [],
            "x_hat_norm": [],
            "saturated": [],
            "delays_ms": [],
        }

        # Exact discretization of the corrected estimator over one sample:
        # x' = (A - Lc C) x + [B, Lc] [u; y].
        a_o = self.a_r - self.l_corr @ self.c_r
        b_aug = np.hstack([self.b_r, self.l_corr])
        m = np.zeros((n + b_aug.shape[1],) * 2)
        m[:n, :n] = a_o
        m[:n, n:] = b_aug
        em = expm(m * self.sample_period)
        self._ad = em[:n, :n]
        self._bd = em[:n, n : n + self.b_r.shape[1]]
        self._ld = em[:n, n + self.b_r.shape[1] :]

    # -- measurement handling --

    def _delayed_measurement(self, t: float, y_dev: np.ndarray) -> np.ndarray:
        if not self.delay.enabled:
            self.telemetry["delays_ms"].append(np.zeros(y_dev.size))
            return y_dev
        d = self._draw_delay(y_dev.size)
        self.telemetry["delays_ms"].append(d * 1e3)
        out = np.empty_like(y_dev)
        hist = list(self._history)
        for i, di in enumerate(d):
            tq = t - di
            yq = y_dev[i]
            for tj, yj in reversed(hist):
                if tj <= tq:
                    yq = yj[i]
                    break
            else:
                if hist:
                    yq = hist[0][1][i]
            out[i] = yq
        return out

    # -- main hook --

    def __call__(self, t: float, y_hz: np.ndarray, dt: float):
        y_dev = np.asarray(y_hz, dtype=float) - self.f_nominal
        self._history.append((t, y_dev.copy()))
        if self._next_sample is None:
            self._next_sample = t
        if t + 1e-12 < self._next_sample:
            return self._cmd
        self._next_sample += self.sample_period

        y_used = self._delayed_measurement(t, y_dev)

        u_raw = self.k_mit @ self.x_hat  # pu commands over all channels
        u = u_raw.copy()
        p = u[self._p_rows] * self.base_mva
        q = u[self._q_rows] * self.base_mva
        if self.v2g_enabled:
            p_cl = np.clip(p, -self.cap_p_mw, self.cap_p_mw)
        else:
            p_cl = np.clip(p, -self.cap_p_mw, 0.0)
        q_cl = np.clip(q, -self.cap_q_mvar, self.cap_q_mvar)
        saturated = bool(np.any(p_cl != p) or np.any(q_cl != q))
        u[self._p_rows] = p_cl / self.base_mva
        u[self._q_rows] = q_cl / self.base_mva
        self._u_pu = u
        self._cmd = {
            b: (float(p_cl[i]), float(q_cl[i])) for i, b in enumerate(self.buses)
        }

        # Estimator update with the clamped command (anti-windup); the Ld
        # path carries y and the -Lc C part of Ad carries -y_hat.
        self.x_hat = self._ad @ self.x_hat + self._bd @ u + self._ld @ y_used

        self.telemetry["t"].append(t)
        self.telemetry["x_hat_norm"].append(float(np.linalg.norm(self.x_hat)))
        self.telemetry["saturated"].append(saturated)
        return self._cmd


def distribute_capacity(
    case: GridCase, total_mw: float, buses: tuple[int, ...] | None = None
) -> tuple[tuple[int, ...], np.ndarray]:
    """Split the aggregate fleet capacity over EV buses in proportion to
    each bus's share of demand (EVCSs follow the load)."""
    buses = tuple(case.ev_buses if buses is None else buses)
    demand = case.demand()
    weights = np.array([max(demand.get(b, 0).real, 0.0) for b in buses])
    if weights.sum() <= 0:
        weights = np.ones(len(buses))
    return buses, total_mw * weights / weights.sum()


def build_controller(
    artifacts: SynthesisArtifacts,
    case: GridCase,
    capacity_mw: float,
    capacity_scale: float = 1.0,
    v2g_enabled: bool = True,
    delay: DelayModel | None = None,
    sample_period: float = SAMPLE_PERIOD_DEFAULT,
) -> ControllerRuntime:
    if capacity_scale <= 0:
        raise ValueError("capacity_scale must be > 0")
    buses, cap = distribute_capacity(case, capacity_mw * capacity_scale)
    return ControllerRuntime(
        artifacts,
        buses,
        cap,
        v2g_enabled=v2g_enabled,
        delay=delay,
        sample_period=sample_period,
        base_mva=case.base_mva,
        f_nominal=case.f_nominal,
    )
