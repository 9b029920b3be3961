"""Shared oracles for the cone-solver tests.

The grid oracle evaluates a ConeProgram on a dense lattice over its box and
is the reference for both the module tests and the acceptance suite.
"""

import numpy as np
import pytest

from uqcbf.barriers import ConeConstraint, ConeProgram


def grid_oracle(program: ConeProgram, n: int = 401):
    """Exhaustive box search: (best objective, best point) or (None, None)."""
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(program.u_min, program.u_max)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, program.dim)
    ones = np.ones((len(mesh), 1))
    ubar = np.hstack([ones, mesh])
    feas = np.ones(len(mesh), dtype=bool)
    for cone in program.cones:
        norms = np.linalg.norm(ubar @ cone.a_rows.T, axis=1) if cone.a_rows.size \
            else np.zeros(len(mesh))
        feas &= mesh @ cone.b + cone.d - cone.c * norms >= -1e-12
    if not np.any(feas):
        return None, None
    pts = mesh[feas]
    objs = np.einsum("ij,jk,ik->i", pts, program.p_matrix, pts) + pts @ program.q
    k = int(np.argmin(objs))
    return float(objs[k]), pts[k]


def make_random_program(rng: np.random.Generator, force: str = "any") -> ConeProgram:
    """Random 2-D cone program; `force` picks robust feasibility/infeasibility.

    Robustly feasible programs contain a ball of margin >= 0.05 around a
    random interior point; robustly infeasible ones have a cone violated by
    at least 0.05 everywhere on the box.  Borderline draws are rejected so
    grid and solver verdicts cannot disagree on discretization error.
    """
    while True:
        half = rng.uniform(0.5, 2.0, size=2)
        program = ConeProgram(
            p_matrix=np.eye(2),
            q=rng.normal(scale=1.5, size=2),
            cones=[_random_cone(rng) for _ in range(rng.integers(1, 4))],
            u_min=-half,
            u_max=half,
        )
        _, best = _margin_extremes(program)
        if force == "feasible" and best < 0.05:
            continue
        if force == "infeasible" and best > -0.05:
            continue
        if force == "any" and -0.05 < best < 0.05:
            continue
        return program


def _random_cone(rng: np.random.Generator) -> ConeConstraint:
    n_rows = int(rng.integers(1, 5))
    return ConeConstraint(
        c=float(rng.uniform(0.0, 2.0)),
        a_rows=rng.normal(scale=0.7, size=(n_rows, 3)),
        b=rng.normal(scale=1.0, size=2),
        d=float(rng.normal(scale=1.0)),
    )


def _margin_extremes(program: ConeProgram, n: int = 101):
    axes = [np.linspace(lo, hi, n) for lo, hi in zip(program.u_min, program.u_max)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, program.dim)
    worst = np.full(len(mesh), np.inf)
    ones = np.ones((len(mesh), 1))
    ubar = np.hstack([ones, mesh])
    for cone in program.cones:
        norms = np.linalg.norm(ubar @ cone.a_rows.T, axis=1) if cone.a_rows.size \
            else np.zeros(len(mesh))
        worst = np.minimum(worst, mesh @ cone.b + cone.d - cone.c * norms)
    return float(worst.min()), float(worst.max())


@pytest.fixture
def cone_oracles():
    return grid_oracle, make_random_program
