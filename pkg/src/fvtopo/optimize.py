"""Discrete add/remove optimizer for compliance minimization.

Each iteration ranks elements by their switch sensitivities and applies the
best move under two integer budgets: the signed volume change of the move
and the total number of switched elements.  The budgets map onto the usual
evolutionary-rate / admission-ratio parameters; after the target volume is
reached the best topology seen so far is tracked and the loop stops once a
patience count of non-improving iterations runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from fvtopo.linalg import factorize_spd
from fvtopo.mesh import FemProblem, as_density, compliance, volume
from fvtopo.selective import SelectiveInverse, selective_inverse_full, selective_inverse_update
from fvtopo.sensitivity import (
    CgmCase,
    SensitivityVector,
    sensitivity_cgm,
    sensitivity_foci,
    sensitivity_hoci,
    sensitivity_naive,
    sensitivity_woodbury,
    zero_all_voids,
    zero_disconnected_voids,
)

__all__ = [
    "MoveConstraints",
    "SensitivityMethod",
    "OptimizerConfig",
    "OptimizerState",
    "schedule",
    "solve_subproblem",
    "conic_filter",
    "momentum_blend",
    "optimize",
    "InfeasibleMoveError",
]

# incremental selective-inverse updates are replaced by a fresh computation
# this often, bounding drift from repeated low-rank updates
_SELECTIVE_REFRESH_PERIOD = 50


class InfeasibleMoveError(ValueError):
    """The requested volume change cannot be realized."""


@dataclass(frozen=True)
class MoveConstraints:
    """Per-iteration budgets: signed volume change and max switched count."""

    vv: int
    tv_max: int

    def __post_init__(self):
        if abs(self.vv) > self.tv_max:
            raise ValueError("|vv| must not exceed tv_max")


@dataclass
class SensitivityMethod:
    """Which analysis drives the optimizer and its knobs."""

    name: str = "foci"  # naive | foci | foci_s | hoci | woodbury | cgm
    eps_v: float = 1e-6
    q: int = 2
    void_mode: str = "zero"  # hoci / cgm void handling: zero | compute
    cgm_case: int = 2
    cgm_steps: int = 2
    cgm_preconditioner: str = "jacobi"

    def __post_init__(self):
        if self.name not in ("naive", "foci", "foci_s", "hoci", "woodbury", "cgm"):
            raise ValueError(f"unknown sensitivity method {self.name!r}")
        if self.void_mode not in ("zero", "compute"):
            raise ValueError("void_mode must be 'zero' or 'compute'")

    @property
    def needs_selective_inverse(self) -> bool:
        return self.name in ("hoci", "woodbury")

    def cgm(self) -> CgmCase:
        return CgmCase(
            case=self.cgm_case,
            steps=self.cgm_steps,
            preconditioner=self.cgm_preconditioner,
        )


@dataclass
class OptimizerConfig:
    er: float = 0.01
    ar_max: float = 0.02
    target_volume_fraction: float = 0.5
    filter_radius: float = 0.0
    momentum: bool = False
    patience: int = 10
    max_iterations: int = 1000
    method: SensitivityMethod = field(default_factory=SensitivityMethod)

    def __post_init__(self):
        if not 0.0 <= self.er <= 1.0:
            raise ValueError("er must lie in [0, 1]")
        if not 0.0 <= self.ar_max <= 1.0:
            raise ValueError("ar_max must lie in [0, 1]")
        if not 0.0 < self.target_volume_fraction <= 1.0:
            raise ValueError("target_volume_fraction must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class OptimizerState:
    """Mutable loop state and the returned result."""

    x: np.ndarray
    compliance: float = np.nan
    best_x: np.ndarray | None = None
    best_compliance: float = np.inf
    best_iteration: int = -1
    momentum_buffer: np.ndarray | None = None
    no_improvement: int = 0
    iterations: int = 0
    degenerated: bool = False
    history: list[tuple[int, float, float]] = field(default_factory=list)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def schedule(n: int, config: OptimizerConfig, current_volume: int, target_volume: int) -> MoveConstraints:
    """Budgets for the next move.

    While the volume is off target the signed change is the evolutionary
    rate clamped so the target is never overshot; the switch budget adds
    twice the admission ratio on top of the realized rate (so the swap
    allowance stays constant once the volume holds still).
    """
    gap = target_volume - current_volume
    if gap == 0:
        vv = 0
    else:
        step = max(_round_half_up(n * config.er), 1) if config.er > 0 else 0
        vv = int(np.sign(gap)) * min(step, abs(gap))
    er_eff = abs(vv) / n
    tv = _round_half_up(n * (er_eff + 2.0 * config.ar_max))
    tv = min(max(tv, abs(vv)), n)
    return MoveConstraints(vv=vv, tv_max=tv)


def solve_subproblem(sv: SensitivityVector, x, mc: MoveConstraints) -> np.ndarray:
    """Optimal variation vector under the move budgets.

    Minimizes sum(alpha_i y_i) subject to sum(y) = vv and sum(|y|) <=
    tv_max: solids are ranked by descending sensitivity and voids by
    ascending sensitivity; the mandatory |vv| switches are taken from the
    top of the relevant ranking, then extra remove/add pairs are taken only
    while they strictly improve the objective.  Connective (masked)
    elements are never removed.  Ties break on the lower element index.
    """
    x = as_density(x, sv.alpha.size)
    alpha = sv.alpha
    if not np.all(np.isfinite(alpha)):
        raise ValueError("sensitivities contain non-finite values")
    removable = (x == 1) & ~sv.masked()
    addable = x == 0

    solids = np.nonzero(removable)[0]
    voids = np.nonzero(addable)[0]
    # stable sorts give (value, index) tie-breaking
    solids = solids[np.argsort(-alpha[solids], kind="stable")]  # descending
    voids = voids[np.argsort(alpha[voids], kind="stable")]  # ascending

    n_remove = max(-mc.vv, 0)
    n_add = max(mc.vv, 0)
    if n_remove > solids.size or n_add > voids.size:
        raise InfeasibleMoveError(
            f"move vv={mc.vv} infeasible with {solids.size} removable solids "
            f"and {voids.size} voids"
        )
    # discretionary swaps: next-best void against next-best solid
    budget = mc.tv_max - n_remove - n_add
    while budget >= 2 and n_remove < solids.size and n_add < voids.size:
        if alpha[voids[n_add]] < alpha[solids[n_remove]]:
            n_remove += 1
            n_add += 1
            budget -= 2
        else:
            break
    y = np.zeros(x.size, dtype=np.int8)
    y[solids[:n_remove]] = -1
    y[voids[:n_add]] = 1
    return y


def conic_filter(mesh, sv: SensitivityVector, radius: float) -> SensitivityVector:
    """Cone-weighted smoothing of the sensitivity map.

    Weights are max(0, radius - centroid distance); masked (connective)
    elements are dropped from the sums as sources and keep their own value
    as targets.  A radius smaller than the element spacing leaves the map
    unchanged (only the self-weight survives).
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    out = sv.copy()
    if radius <= 0.0:
        return out
    rx = int(np.ceil(radius / mesh.elem_w))
    ry = int(np.ceil(radius / mesh.elem_h))
    dx = np.arange(-rx, rx + 1) * mesh.elem_w
    dy = np.arange(-ry, ry + 1) * mesh.elem_h
    kernel = radius - np.hypot(dy[:, None], dx[None, :])
    kernel[kernel < 0.0] = 0.0

    src = ~sv.masked()
    val_grid = np.zeros(mesh.shape)
    src_grid = np.zeros(mesh.shape)
    rows, cols = mesh.elem_row, mesh.elem_col
    val_grid[rows, cols] = np.where(src, sv.alpha, 0.0)
    src_grid[rows, cols] = src.astype(float)
    num = scipy.ndimage.convolve(val_grid, kernel, mode="constant", cval=0.0)
    den = scipy.ndimage.convolve(src_grid, kernel, mode="constant", cval=0.0)
    filtered = np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)
    target = src  # masked elements keep their raw value
    out.alpha[target] = filtered[rows[target], cols[target]]
    return out


def momentum_blend(
    current: np.ndarray, buffer: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight blend with the previous final sensitivities.

    First call passes the input through and seeds the buffer; afterwards
    the output is the mean of the current map and the stored one, and the
    buffer keeps the blended output (so older maps decay geometrically).
    """
    if buffer is None:
        out = current.copy()
    else:
        if buffer.shape != current.shape:
            raise ValueError("momentum buffer length mismatch")
        out = 0.5 * (current + buffer)
    return out, out.copy()


def _compute_sensitivity(problem, x, u, method, k, fact, s) -> SensitivityVector:
    if method.name == "naive":
        return sensitivity_naive(problem, x)
    if method.name == "foci":
        return sensitivity_foci(problem, x, u, eps_v=method.eps_v)
    if method.name == "foci_s":
        return sensitivity_foci(problem, x, u, eps_v=0.0)
    if method.name == "hoci":
        mode = "zero" if method.void_mode == "zero" else "skip"
        return sensitivity_hoci(problem, x, u, s, q=method.q, void_mode=mode)
    if method.name == "woodbury":
        return sensitivity_woodbury(problem, x, u, s)
    return sensitivity_cgm(problem, x, u, method.cgm(), k=k, fact=fact)


def optimize(
    problem: FemProblem,
    config: OptimizerConfig,
    x_initial,
    on_iteration=None,
) -> OptimizerState:
    """Run the optimizer until patience runs out (or max_iterations).

    Per iteration: assemble and factorize, solve for the displacements,
    evaluate the configured sensitivity analysis, zero void entries the
    method computed (disconnected ones always, all of them when the method
    says so), filter, blend with momentum, schedule the move budgets and
    apply the best move.  Returns the state holding the best topology seen
    at the target volume.  ``on_iteration(state)`` runs after each history
    append (studies use it to harvest per-iteration topologies).
    """
    mesh = problem.mesh
    n = problem.n_elements
    x = as_density(x_initial, n).copy()
    target = _round_half_up(config.target_volume_fraction * n)
    state = OptimizerState(x=x)
    method = config.method

    s: SelectiveInverse | None = None
    updates_since_full = 0

    for it in range(config.max_iterations):
        k = problem.assemble(x)
        fact = factorize_spd(k)
        u = fact.solve(problem.f)
        c = compliance(u, problem.f)
        v = volume(x)
        state.x = x
        state.compliance = c
        state.iterations = it + 1
        state.history.append((it, v / n, c))

        if v == target:
            if c < state.best_compliance:
                state.best_compliance = c
                state.best_x = x.copy()
                state.best_iteration = it
                state.no_improvement = 0
            else:
                state.no_improvement += 1
            if state.no_improvement >= config.patience:
                break
        if on_iteration is not None and on_iteration(state) is False:
            break

        if method.needs_selective_inverse:
            if s is None or updates_since_full >= _SELECTIVE_REFRESH_PERIOD:
                s = selective_inverse_full(fact, k)
                updates_since_full = 0

        sv = _compute_sensitivity(problem, x, u, method, k, fact, s)
        if method.name == "cgm" and method.void_mode == "zero":
            zero_all_voids(sv, x)
        elif method.name in ("foci", "cgm", "hoci", "naive", "woodbury"):
            # methods that computed void values: disconnected voids are
            # known zeros before filtering
            zero_disconnected_voids(sv, problem, x)

        if config.filter_radius > 0.0:
            sv = conic_filter(mesh, sv, config.filter_radius)
        if config.momentum:
            blended, buf = momentum_blend(sv.alpha, state.momentum_buffer)
            buf[sv.masked()] = 0.0  # masked values never feed later averages
            state.momentum_buffer = buf
            sv = SensitivityVector(blended, sv.status, sv.diverged, sv.failed)

        mc = schedule(n, config, v, target)
        y = solve_subproblem(sv, x, mc)

        if method.needs_selective_inverse and np.any(y != 0):
            switched = np.nonzero(y)[0]
            delta_dofs = np.unique(np.concatenate([mesh.elem_dofs[e] for e in switched]))
            delta = np.zeros((delta_dofs.size, delta_dofs.size))
            pos = {d: j for j, d in enumerate(delta_dofs)}
            for e in switched:
                dofs = mesh.elem_dofs[e]
                loc = np.array([pos[d] for d in dofs])
                delta[np.ix_(loc, loc)] += float(y[e]) * problem.elem_variation_matrix(e)
            s = selective_inverse_update(s, fact, delta_dofs, delta)
            updates_since_full += 1

        x = x + y

    state.x = x
    return state
