"""Small second-order cone solver for the safety-filtered control problem.

Controls are at most 3-dimensional, so an SLSQP solve with a smoothed cone
norm, a phase-1 max-margin feasibility pass, and a handful of starts is both
simple and reliable.  The accuracy contract is defined against an exhaustive
grid oracle over the box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .barriers import ConeProgram

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-6
_SMOOTH = 1e-12  # cone norm smoothing; tightens each cone by at most c * 1e-6


@dataclass
class SolveResult:
    u: np.ndarray
    status: str  # "optimal" or "infeasible"
    objective: float
    min_margin: float
    active_cones: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _smoothed_margins(program: ConeProgram, u: np.ndarray) -> np.ndarray:
    ubar = np.concatenate([[1.0], u])
    out = np.empty(len(program.cones))
    for i, cone in enumerate(program.cones):
        if cone.a_rows.size and cone.c > 0:
            norm = np.sqrt(np.sum((cone.a_rows @ ubar) ** 2) + _SMOOTH)
        else:
            norm = 0.0
        out[i] = cone.b @ u + cone.d - cone.c * norm
    return out


def _starts(program: ConeProgram, rng: np.random.Generator) -> list[np.ndarray]:
    lo, hi = program.u_min, program.u_max
    center = (lo + hi) / 2.0
    pts = [np.clip(np.zeros(program.dim), lo, hi), center]
    corners = np.stack(np.meshgrid(*zip(lo, hi))).reshape(program.dim, -1).T
    pts.extend(corners)
    pts.extend(rng.uniform(lo, hi, size=(4, program.dim)))
    return pts


def _phase1(program: ConeProgram, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Maximize the worst cone margin over the box; returns (u, margin)."""
    lo, hi = program.u_min, program.u_max

    def neg_worst(u):
        return -np.min(_smoothed_margins(program, u))

    best_u, best_m = None, -np.inf
    for start in _starts(program, rng):
        res = minimize(neg_worst, start, method="Nelder-Mead",
                       bounds=list(zip(lo, hi)),
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000})
        u = np.clip(res.x, lo, hi)
        m = program.min_margin(u)
        if m > best_m:
            best_u, best_m = u, m
    return best_u, best_m


def solve(program: ConeProgram, seed: int = 0, thorough: bool = True) -> SolveResult:
    """Minimize the quadratic cost subject to cones and box bounds.

    Status is "infeasible" only when the phase-1 max-margin solve cannot find
    any point with all cone margins >= -FEAS_TOL.  `thorough=False` skips the
    multi-start polish; sufficient for the convex in-loop control programs
    and roughly an order of magnitude faster.
    """
    rng = np.random.default_rng(seed)
    lo, hi = program.u_min, program.u_max
    bounds = list(zip(lo, hi))

    feas_u, feas_margin = None, -np.inf
    for cand in _starts(program, rng):
        m = program.min_margin(cand)
        if m > feas_margin:
            feas_u, feas_margin = cand, m
    if feas_margin < FEAS_TOL and program.cones:
        feas_u, feas_margin = _phase1(program, rng)
    if feas_margin < -FEAS_TOL:
        result = SolveResult(feas_u, "infeasible", program.objective(feas_u),
                             feas_margin,
                             diagnostics={"phase1_margin": feas_margin})
        logger.info("socp status=infeasible margin=%.3e", feas_margin)
        return result

    constraints = []
    if program.cones:
        constraints.append({"type": "ineq",
                            "fun": lambda u: _smoothed_margins(program, u)})

    best_u, best_obj = feas_u, np.inf
    if program.min_margin(feas_u) >= -FEAS_TOL:
        best_obj = program.objective(feas_u)
    starts = [feas_u] + (_starts(program, rng) if thorough else [])
    for start in starts:
        res = minimize(program.objective, start, method="SLSQP",
                       bounds=bounds, constraints=constraints,
                       options={"ftol": 1e-12, "maxiter": 300})
        u = np.clip(res.x, lo, hi)
        if program.min_margin(u) < -FEAS_TOL:
            # pull back toward the known feasible point
            for t in np.linspace(0.0, 1.0, 21)[1:]:
                cand = (1 - t) * u + t * feas_u
                if program.min_margin(cand) >= -FEAS_TOL:
                    u = cand
                    break
            else:
                continue
        obj = program.objective(u)
        if obj < best_obj:
            best_u, best_obj = u, obj

    margins = np.array([c.margin(best_u) for c in program.cones]) \
        if program.cones else np.empty(0)
    active = [i for i, m in enumerate(margins) if m < 1e-5]
    result = SolveResult(best_u, "optimal", best_obj,
                         float(margins.min()) if margins.size else np.inf,
                         active_cones=active)
    logger.info("socp status=optimal obj=%.6g active=%s", best_obj, active)
    return result


def feasibility_fallback(program: ConeProgram, rebuild_after_retrain=None,
                         seed: int = 0,
                         thorough: bool = True) -> tuple[SolveResult, list[str]]:
    """Recovery ladder for infeasible safety programs.

    First retrains the model once via the supplied callback (which must
    return a rebuilt program), then halves all variance rows up to five
    times, then drops the variance term entirely so the constraint holds
    in expectation only.  Always returns a control.
    """
    actions: list[str] = []
    result = solve(program, seed=seed, thorough=thorough)
    if result.ok:
        return result, actions
    if rebuild_after_retrain is not None:
        program = rebuild_after_retrain()
        actions.append("retrain")
        result = solve(program, seed=seed, thorough=thorough)
        if result.ok:
            return result, actions
    scaled = program
    for k in range(1, 6):
        scaled = scaled.scaled_variance(0.5)
        actions.append(f"scale_variance_0.5^{k}")
        result = solve(scaled, seed=seed, thorough=thorough)
        if result.ok:
            return result, actions
    actions.append("expectation_only")
    result = solve(program.expectation_only(), seed=seed, thorough=thorough)
    if result.ok:
        return result, actions
    # even the mean constraint fails inside the box: return the max-margin
    # control so the caller still gets something executable
    actions.append("max_margin")
    return result, actions
