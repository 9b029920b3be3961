"""Control barrier conditions over learned control-affine dynamics.

The per-step chance constraint  P(CBC >= zeta) >= p  compiles to the cone
constraint  E[CBC] - zeta - c_p * sqrt(Var[CBC]) >= 0,  where both the mean
and the deviation are affine in the extended control ubar = [1; u].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def risk_multiplier(p: float) -> float:
    """sqrt(2) * erfinv(2p - 1): the standard normal quantile at p.

    Solved by Newton iteration on the error function (bisection-guarded),
    accurate to ~1e-12; no special-function inverse is used.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly inside (0, 1)")
    target = 2.0 * p - 1.0
    if target == 0.0:
        return 0.0
    # bracket: |erfinv(t)| <= 6 covers |t| < 1 - 1e-15
    lo, hi = -6.0, 6.0
    t = 0.0
    for _ in range(100):
        err = math.erf(t) - target
        if abs(err) < 1e-16:
            break
        if err > 0:
            hi = t
        else:
            lo = t
        step = err * math.sqrt(math.pi) / 2.0 * math.exp(min(t * t, 700.0))
        t_new = t - step
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) < 1e-15:
            t = t_new
            break
        t = t_new
    return math.sqrt(2.0) * t


@dataclass(frozen=True)
class BarrierSpec:
    """Quadratic barrier h(x) = sign * ((x - center)^T Q (x - center) - 1).

    sign=+1 keeps the system outside the ellipse (obstacle); sign=-1 keeps it
    inside (room wall).  alpha_gain is the linear class-K gain in
    alpha(h) = gain * h.
    """

    center: tuple
    q_matrix: tuple  # row-major 2x2 (or dxd) entries
    sign: int = +1
    alpha_gain: float = 1.0
    zeta: float = 0.0

    def __post_init__(self):
        q = self.q_array
        if not np.allclose(q, q.T):
            raise ValueError("Q must be symmetric")
        if np.any(np.linalg.eigvalsh(q) <= 0):
            raise ValueError("Q must be positive definite")
        if self.alpha_gain <= 0:
            raise ValueError("alpha_gain must be positive")
        if self.sign not in (+1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def q_array(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return np.asarray(self.q_matrix, dtype=float).reshape(len(c), len(c))


def barrier_value(spec: BarrierSpec, pos: np.ndarray) -> float:
    d = np.asarray(pos, dtype=float) - spec.center_array
    return float(spec.sign * (d @ spec.q_array @ d - 1.0))


def barrier_gradient(spec: BarrierSpec, pos: np.ndarray) -> np.ndarray:
    d = np.asarray(pos, dtype=float) - spec.center_array
    return spec.sign * 2.0 * spec.q_array @ d


@dataclass
class DynamicsPrediction:
    """Learned F(x) with uncertainty: xdot = F(x) [1; u].

    mean: (n_state, n_u+1); members: optional (L, n_state, n_u+1) epistemic
    samples; entry_std: optional per-entry aleatoric standard deviations of
    the same shape.
    """

    mean: np.ndarray
    members: np.ndarray | None = None
    entry_std: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.members is not None:
            self.members = np.asarray(self.members, dtype=float)
            if self.members.shape[1:] != self.mean.shape:
                raise ValueError("member shape mismatch")
        if self.entry_std is not None:
            self.entry_std = np.asarray(self.entry_std, dtype=float)
            if self.entry_std.shape != self.mean.shape:
                raise ValueError("entry_std shape mismatch")
            if np.any(self.entry_std < 0):
                raise ValueError("entry_std must be nonnegative")


@dataclass
class CbcDistribution:
    """Affine representation of the CBC's mean and deviation in ubar = [1; u].

    E[CBC](u) = b.u + d;  Var[CBC](u) = ||dev_rows @ ubar||^2 +
    ||aleat_rows @ ubar||^2.
    """

    b: np.ndarray
    d: float
    dev_rows: np.ndarray    # (n_rows, n_u+1); empty when no epistemic members
    aleat_rows: np.ndarray  # (n_rows, n_u+1); empty when no direct estimator
    barrier_h: float = 0.0

    def mean(self, u: np.ndarray) -> float:
        return float(self.b @ np.asarray(u, dtype=float) + self.d)

    def variance(self, u: np.ndarray) -> float:
        ubar = np.concatenate([[1.0], np.asarray(u, dtype=float)])
        total = 0.0
        for rows in (self.dev_rows, self.aleat_rows):
            if rows.size:
                total += float(np.sum((rows @ ubar) ** 2))
        return total

    def variance_rows(self) -> np.ndarray:
        parts = [r for r in (self.dev_rows, self.aleat_rows) if r.size]
        if not parts:
            n = len(self.b) + 1
            return np.zeros((0, n))
        return np.vstack(parts)


def lookahead_point(state: np.ndarray, offset: float) -> np.ndarray:
    x, y, theta = state
    return np.array([x + offset * math.cos(theta), y + offset * math.sin(theta)])


def state_gradient(spec: BarrierSpec, state: np.ndarray, offset: float) -> np.ndarray:
    """Gradient of h(lookahead(state)) w.r.t. the full (x, y, theta) state."""
    p = lookahead_point(state, offset)
    gp = barrier_gradient(spec, p)
    theta = state[2]
    dtheta = gp @ np.array([-offset * math.sin(theta), offset * math.cos(theta)])
    return np.array([gp[0], gp[1], dtheta])


def cbc_distribution(spec: BarrierSpec, dyn: DynamicsPrediction, state: np.ndarray,
                     look_ahead: float = 0.1) -> CbcDistribution:
    """Compile CBC(x, u) = grad_h . F(x) ubar + alpha(h) into affine form.

    Epistemic rows come from member deviations scaled by 1/sqrt(L-1)
    (sample covariance); aleatoric rows from per-entry standard deviations
    projected through |grad_h| under an independence assumption.
    """
    state = np.asarray(state, dtype=float)
    h = barrier_value(spec, lookahead_point(state, look_ahead))
    grad = state_gradient(spec, state, look_ahead)
    n_cols = dyn.mean.shape[1]
    v_mean = dyn.mean.T @ grad  # (n_u+1,)
    b = v_mean[1:]
    d = float(v_mean[0] + spec.alpha_gain * h)
    if dyn.members is not None and len(dyn.members) >= 2:
        ell = len(dyn.members)
        f_hat = dyn.members.mean(axis=0)
        dev_rows = np.stack([(m - f_hat).T @ grad for m in dyn.members])
        dev_rows /= math.sqrt(ell - 1)
    else:
        dev_rows = np.zeros((0, n_cols))
    if dyn.entry_std is not None:
        scale = np.sqrt(np.sum((grad[:, None] * dyn.entry_std) ** 2, axis=0))
        aleat_rows = np.diag(scale)
    else:
        aleat_rows = np.zeros((0, n_cols))
    return CbcDistribution(b, d, dev_rows, aleat_rows, barrier_h=h)


@dataclass
class ConeConstraint:
    """c * ||A ubar|| <= b.u + d, with ubar = [1; u]."""

    c: float
    a_rows: np.ndarray
    b: np.ndarray
    d: float

    def margin(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        ubar = np.concatenate([[1.0], u])
        norm = np.linalg.norm(self.a_rows @ ubar) if self.a_rows.size else 0.0
        return float(self.b @ u + self.d - self.c * norm)


@dataclass
class ConeProgram:
    """min u^T P u + q.u subject to cones and box bounds."""

    p_matrix: np.ndarray
    q: np.ndarray
    cones: list[ConeConstraint]
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        self.p_matrix = np.asarray(self.p_matrix, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if np.any(np.linalg.eigvalsh((self.p_matrix + self.p_matrix.T) / 2) < -1e-10):
            raise ValueError("cost matrix must be PSD")

    @property
    def dim(self) -> int:
        return len(self.q)

    def objective(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.p_matrix @ u + self.q @ u)

    def min_margin(self, u: np.ndarray) -> float:
        if not self.cones:
            return math.inf
        return min(cone.margin(u) for cone in self.cones)

    def to_json(self) -> str:
        return json.dumps({
            "P": self.p_matrix.tolist(),
            "q": self.q.tolist(),
            "cones": [{"c": c.c, "A": c.a_rows.tolist(),
                       "b": c.b.tolist(), "d": c.d} for c in self.cones],
            "u_min": self.u_min.tolist(),
            "u_max": self.u_max.tolist(),
        })

    def scaled_variance(self, factor: float) -> "ConeProgram":
        cones = [ConeConstraint(c.c, c.a_rows * factor, c.b.copy(), c.d)
                 for c in self.cones]
        return ConeProgram(self.p_matrix, self.q, cones, self.u_min, self.u_max)

    def expectation_only(self) -> "ConeProgram":
        cones = [ConeConstraint(0.0, np.zeros_like(c.a_rows), c.b.copy(), c.d)
                 for c in self.cones]
        return ConeProgram(self.p_matrix, self.q, cones, self.u_min, self.u_max)


def build_program(cbcs: list[CbcDistribution], p: float, zeta: float,
                  u_min: np.ndarray, u_max: np.ndarray,
                  goal_gradient: np.ndarray | None = None,
                  goal_weight: float = 1.0) -> ConeProgram:
    """One cone per barrier: c_p ||A ubar|| <= E[CBC](u) - zeta.

    Objective is ||u||^2 plus an optional linear goal-descent term
    goal_weight * (goal_gradient . u).
    """
    c_p = max(risk_multiplier(p), 0.0)
    u_min = np.asarray(u_min, dtype=float)
    dim = len(u_min)
    cones = []
    for cbc in cbcs:
        cones.append(ConeConstraint(c_p, cbc.variance_rows(), cbc.b.copy(),
                                    cbc.d - zeta))
    q = np.zeros(dim)
    if goal_gradient is not None:
        q = goal_weight * np.asarray(goal_gradient, dtype=float)
    return ConeProgram(np.eye(dim), q, cones, u_min, np.asarray(u_max, dtype=float))


def goal_descent_vector(dyn_mean: np.ndarray, state: np.ndarray,
                        goal_pos: np.ndarray, offset: float = 0.1) -> np.ndarray:
    """Linear-in-u coefficient of grad V . F(x) ubar for V = ||p - goal||^2.

    V is evaluated at the look-ahead point p(x): a goal on the raw position
    has zero gradient in heading, so the turn rate would never be actuated.
    """
    state = np.asarray(state, dtype=float)
    p = lookahead_point(state, offset)
    gpos = 2.0 * (p - np.asarray(goal_pos, dtype=float))
    theta = state[2]
    grad_v = np.array([gpos[0], gpos[1],
                       gpos @ np.array([-offset * math.sin(theta),
                                        offset * math.cos(theta)])])
    return (dyn_mean.T @ grad_v)[1:]
