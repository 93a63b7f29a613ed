"""Shared helpers: random well-conditioned test problems.

The exactness fixtures use a moderate soft-kill parameter (1e-4) so the
linear systems stay well enough conditioned for tight cross-method
tolerances, keep the loaded node attached to solid material, and reject
draws whose removal operators come too close to singular (those are the
provably ill-posed connective configurations, which the analyses tag and
mask rather than resolve).
"""

import numpy as np
import pytest

from fvtopo.linalg import factorize_spd
from fvtopo.mesh import FemProblem, Material, Mesh, point_load
from fvtopo.selective import selective_inverse_full
from fvtopo.sensitivity import norm_map


def random_problem(rng, eps_k=1e-4, density=0.85, nu=0.3, max_nx=7, max_ny=6):
    """One random mesh + topology with the loaded-node elements solid."""
    nx, ny = int(rng.integers(3, max_nx)), int(rng.integers(2, max_ny))
    fixed = [(0, r, c) for r in range(ny + 1) for c in (0, 1)]
    mesh = Mesh(nx, ny, 1.0, 1.0, fixed=fixed)
    mid = ny // 2
    f = point_load(
        mesh,
        [(mesh.node_at(nx, mid), 1, -1.0), (mesh.node_at(nx, mid), 0, 0.5)],
    )
    problem = FemProblem(mesh, Material(1.0, nu), f, eps_k=eps_k)
    x = (rng.random(mesh.n_elements) < density).astype(np.int8)
    for r in (mid - 1, mid):
        if 0 <= r < ny:
            x[mesh.element_at(nx - 1, r)] = 1
    return problem, x


def solved(problem, x):
    """(K, factorization, displacements) of a topology."""
    k = problem.assemble(x)
    fact = factorize_spd(k)
    return k, fact, fact.solve(problem.f)


def well_conditioned_instance(rng, **kw):
    """Random instance rejected while any solid removal is near singular."""
    while True:
        problem, x = random_problem(rng, **kw)
        k, fact, u = solved(problem, x)
        s = selective_inverse_full(fact, k)
        solid = x == 1
        if not solid.any():
            continue
        if norm_map(problem, x, s)[solid].max() <= 1.0 - 1e-6:
            return problem, x, k, fact, u, s


def mild_instance(rng, eps_k=1e-2, n_voids=2):
    """Solid rectangle with a few isolated interior voids.

    No floppy void regions, so every perturbed system stays well enough
    conditioned for iterative-convergence assertions.
    """
    nx, ny = int(rng.integers(4, 7)), int(rng.integers(3, 6))
    fixed = [(0, r, c) for r in range(ny + 1) for c in (0, 1)]
    mesh = Mesh(nx, ny, 1.0, 1.0, fixed=fixed)
    mid = ny // 2
    f = point_load(
        mesh,
        [(mesh.node_at(nx, mid), 1, -1.0), (mesh.node_at(nx, mid), 0, 0.5)],
    )
    problem = FemProblem(mesh, Material(1.0, 0.3), f, eps_k=eps_k)
    x = np.ones(mesh.n_elements, dtype=np.int8)
    cells = [(c, r) for c in range(1, nx - 1) for r in range(1, ny - 1)]
    perm = rng.permutation(len(cells))
    chosen: list[tuple[int, int]] = []
    for idx in perm:
        c, r = cells[idx]
        if all(max(abs(c - c2), abs(r - r2)) >= 2 for c2, r2 in chosen):
            chosen.append((c, r))
        if len(chosen) == n_voids:
            break
    for c, r in chosen:
        x[mesh.element_at(c, r)] = 0
    return problem, x


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
