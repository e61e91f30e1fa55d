"""Hankel-singular-value analysis and balanced truncation.

Gramians come from dense Lyapunov solves (Bartels-Stewart); the balancing
transformation uses the square-root method (gramian factors + SVD) for
conditioning.  Both the defender input and attack disturbance channels
count as inputs for the balancing, so the reduced model preserves the
disturbance path the controller synthesis needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .errors import CaseFormatError, NotHurwitz
from .linearize import SSM_SCHEMA, StateSpaceModel, parse_statespace, serialize_statespace

REDUCED_SCHEMA = "reducedmodel-1"


def _assert_hurwitz(a: np.ndarray, what: str = "matrix") -> None:
    if a.size == 0:
        return
    ev = np.linalg.eigvals(a)
    worst = float(ev.real.max())
    if worst >= 0.0:
        raise NotHurwitz(f"{what} has eigenvalue with Re = {worst:.3e} >= 0")


def lyapunov_solve(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve a p + p a^T + q = 0 for symmetric PSD p; a must be Hurwitz."""
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    if not np.allclose(q, q.T, atol=1e-12 * max(1.0, np.linalg.norm(q))):
        raise ValueError("q must be symmetric")
    _assert_hurwitz(a, "lyapunov_solve: a")
    p = solve_continuous_lyapunov(a, -q)
    p = 0.5 * (p + p.T)
    resid = np.linalg.norm(a @ p + p @ a.T + q)
    bound = 1e-10 * (np.linalg.norm(a) * np.linalg.norm(p) + np.linalg.norm(q))
    if resid > max(bound, 1e-12):
        raise NotHurwitz(
            f"lyapunov residual {resid:.2e} exceeds bound {bound:.2e} "
            "(a is likely too close to the imaginary axis)"
        )
    return p


def _input_matrix(ssm: StateSpaceModel) -> np.ndarray:
    return np.hstack([ssm.b, ssm.b_d]) if ssm.b_d.size else ssm.b


def gramians(ssm: StateSpaceModel) -> tuple[np.ndarray, np.ndarray]:
    b = _input_matrix(ssm)
    p_c = lyapunov_solve(ssm.a, b @ b.T)
    p_o = lyapunov_solve(ssm.a.T, ssm.c.T @ ssm.c)
    return p_c, p_o


def hankel_values(ssm: StateSpaceModel) -> np.ndarray:
    """Nonincreasing positive Hankel singular values of the model."""
    p_c, p_o = gramians(ssm)
    ev = np.linalg.eigvals(p_c @ p_o)
    sigma = np.sqrt(np.clip(ev.real, 0.0, None))
    return np.sort(sigma)[::-1]


def _psd_factor(p: np.ndarray) -> np.ndarray:
    """Factor p = f f^T for symmetric PSD p, tolerant of tiny negatives."""
    w, u = np.linalg.eigh(p)
    w = np.clip(w, 0.0, None)
    return u * np.sqrt(w)


@dataclass
class ReducedModel:
    ssm: StateSpaceModel
    hankel: np.ndarray          # full-model sigma sequence, nonincreasing
    kept_order: int
    energy_fraction: float
    t: np.ndarray               # full-state <- reduced-state map (n x k)
    t_inv: np.ndarray           # reduced-state <- full-state map (k x n)

    def tail_bound(self) -> float:
        """Twice the sum of the discarded Hankel values."""
        return 2.0 * float(np.sum(self.hankel[self.kept_order :]))


def balanced_truncate(
    ssm: StateSpaceModel,
    order: int | None = None,
    energy: float | None = None,
) -> ReducedModel:
    """Square-root balanced truncation to a target order or energy fraction."""
    n = ssm.order
    if (order is None) == (energy is None):
        raise ValueError("give exactly one of order or energy")
    if order is not None and not (1 <= order <= n):
        raise ValueError(f"order must be in [1, {n}]")
    if energy is not None and not (0.0 < energy <= 1.0):
        raise ValueError("energy must be in (0, 1]")

    p_c, p_o = gramians(ssm)
    l_c = _psd_factor(p_c)
    l_o = _psd_factor(p_o)
    u, sigma, vt = np.linalg.svd(l_o.T @ l_c)

    total = float(np.sum(sigma))
    if energy is not None:
        csum = np.cumsum(sigma) / total
        order = int(np.searchsorted(csum, energy - 1e-12) + 1)
        order = min(order, n)
    k = order

    s_half = np.sqrt(sigma[:k])
    t = l_c @ vt[:k].T / s_half
    t_inv = (u[:, :k] / s_half).T @ l_o.T

    a_r = t_inv @ ssm.a @ t
    b_r = t_inv @ ssm.b
    bd_r = t_inv @ ssm.b_d
    c_r = ssm.c @ t

    reduced = StateSpaceModel(
        a=a_r,
        b=b_r,
        b_d=bd_r,
        c=c_r,
        d=ssm.d.copy(),
        d_d=ssm.d_d.copy(),
        state_labels=tuple(f"bal_{i+1}" for i in range(k)),
        input_labels=ssm.input_labels,
        disturbance_labels=ssm.disturbance_labels,
        output_labels=ssm.output_labels,
        operating_point=ssm.operating_point + f" [balanced k={k}]",
    )
    _assert_hurwitz(a_r, "reduced model A")
    return ReducedModel(
        ssm=reduced,
        hankel=sigma,
        kept_order=k,
        energy_fraction=float(np.sum(sigma[:k]) / total),
        t=t,
        t_inv=t_inv,
    )


# ---- serialization ------------------------------------------------------


def serialize_reduced(rm: ReducedModel) -> str:
    body = serialize_statespace(rm.ssm)
    lines = [
        f"schema {REDUCED_SCHEMA}",
        f"kept_order {rm.kept_order}",
        f"energy_fraction {rm.energy_fraction!r}",
        "[hankel]",
        " ".join(repr(float(s)) for s in rm.hankel),
        "",
        body,
    ]
    return "\n".join(lines)


def parse_reduced(text: str) -> ReducedModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"schema {REDUCED_SCHEMA}":
        raise CaseFormatError("not a reduced-model document")
    kept = None
    energy = None
    hankel = None
    body_start = None
    i = 1
    while i < len(lines):
        ln = lines[i].strip()
        if ln.startswith("kept_order"):
            kept = int(ln.split()[1])
        elif ln.startswith("energy_fraction"):
            energy = float(ln.split()[1])
        elif ln == "[hankel]":
            i += 1
            hankel = np.array([float(t) for t in lines[i].split()])
        elif ln == f"schema {SSM_SCHEMA}":
            body_start = i
            break
        i += 1
    if kept is None or hankel is None or body_start is None:
        raise CaseFormatError("reduced-model document missing fields")
    ssm = parse_statespace("\n".join(lines[body_start:]))
    k, n = kept, hankel.size
    return ReducedModel(
        ssm=ssm,
        hankel=hankel,
        kept_order=k,
        energy_fraction=energy if energy is not None else float(np.sum(hankel[:k]) / np.sum(hankel)),
        t=np.zeros((0, 0)),      # balancing maps are not persisted
        t_inv=np.zeros((0, 0)),
    )
