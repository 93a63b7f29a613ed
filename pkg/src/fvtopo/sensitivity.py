"""Finite-variation sensitivity analyses for compliance minimization.

The sensitivity of element i is the compliance change from switching its
binary state: alpha_i = C(x, x_i=1) - C(x, x_i=0).  Five ways to obtain or
estimate it:

  naive     exact, one perturbed factorization per element;
  foci      local quadratic form of the current displacements, with a
            penalization eps_v on void elements;
  hoci      truncated power series in the element operator A_i (may
            diverge on voids);
  woodbury  exact closed form through a small solve per element;
  cgm       m preconditioned conjugate-gradient steps on the perturbed
            system, with three initial-condition recipes.

hoci and woodbury work through A_i = sqrt(K_i) Kbar^-1 sqrt(K_i), whose
blocks come from a selective inverse of the assembled matrix.  The spectral
norm of A_i bounds the series truncation error; for solid elements it is
provably below 1, for voids it may exceed 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
import scipy.sparse as sp

from fvtopo.linalg import (
    FactorPreconditioner,
    Factorization,
    IdentityPreconditioner,
    JacobiPreconditioner,
    PcgBreakdownError,
    RankUpdateOperator,
    factorize_spd,
    pcg,
)
from fvtopo.mesh import FemProblem, as_density
from fvtopo.selective import SelectiveInverse

__all__ = [
    "Status",
    "SensitivityVector",
    "ElementOperator",
    "CgmCase",
    "sensitivity_naive",
    "sensitivity_foci",
    "sensitivity_hoci",
    "sensitivity_woodbury",
    "sensitivity_cgm",
    "cgm_closed_form",
    "element_operator",
    "complement_operator",
    "error_bounds",
    "norm_map",
    "disconnected_void_mask",
    "zero_disconnected_voids",
    "zero_all_voids",
    "NaiveSensitivityError",
    "InternalConsistencyError",
]

# a solid element whose removal leaves max eigenvalue of A_i this close to 1
# is a connective element (its exact sensitivity blows up with 1/eps_k)
_CONNECTIVE_TOL = 1e-9
_SOLID_GUARD_LIMIT = 10000


class Status(IntEnum):
    COMPUTED = 0
    FORCED_ZERO_DISCONNECTED = 1
    MASKED_CONNECTIVE = 2
    ZEROED_VOID = 3


@dataclass
class SensitivityVector:
    """Per-element switch sensitivities with provenance tags.

    ``diverged`` marks void elements whose series cannot converge (hoci);
    ``failed`` marks elements whose iterative estimate broke down (cgm).
    """

    alpha: np.ndarray
    status: np.ndarray
    diverged: np.ndarray | None = None
    failed: np.ndarray | None = None

    def masked(self) -> np.ndarray:
        return self.status == Status.MASKED_CONNECTIVE

    def copy(self) -> "SensitivityVector":
        return SensitivityVector(
            self.alpha.copy(),
            self.status.copy(),
            None if self.diverged is None else self.diverged.copy(),
            None if self.failed is None else self.failed.copy(),
        )


@dataclass
class ElementOperator:
    """Spectral data of one element's operator A_i (or its complement).

    A is the symmetric PSD matrix sqrt(K_i) Kbar^-1 sqrt(K_i) on the
    element's free DOFs, v = sqrt(K_i) u restricted to them, lam/phi its
    eigen decomposition and w = phi^T v the transformed vector.
    """

    element: int
    is_solid: bool
    a: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    w: np.ndarray

    @property
    def norm(self) -> float:
        return float(self.lam[-1]) if self.lam.size else 0.0


class NaiveSensitivityError(RuntimeError):
    """One or more perturbed systems could not be solved."""

    def __init__(self, failures: dict):
        self.failures = failures
        super().__init__(f"perturbed solve failed for elements {sorted(failures)}")


class InternalConsistencyError(RuntimeError):
    """A provably-impossible state was observed (e.g. solid |A| >= 1)."""


# ---------------------------------------------------------------------------
# grouped per-element data, cached on the problem


class _Groups:
    """Elements grouped by their constrained-DOF pattern for batched math."""

    def __init__(self, problem: FemProblem):
        mesh = problem.mesh
        by_key: dict[tuple, list[int]] = {}
        for e, loc in enumerate(mesh.elem_local):
            by_key.setdefault(tuple(loc), []).append(e)
        self.groups = []
        for key, elems in by_key.items():
            elems = np.array(elems, dtype=np.int64)
            dofs = np.vstack([mesh.elem_dofs[e] for e in elems])
            ksub0 = problem.elem_solid_matrix(int(elems[0]))
            sqrt_i = problem.elem_variation_sqrt(int(elems[0]))
            ki = problem.elem_variation_matrix(int(elems[0]))
            self.groups.append((elems, dofs, ksub0, ki, sqrt_i))

    @staticmethod
    def of(problem: FemProblem) -> "_Groups":
        cached = getattr(problem, "_fvtopo_groups", None)
        if cached is None:
            cached = _Groups(problem)
            problem._fvtopo_groups = cached
        return cached


class _BlockIndex:
    """Flat positions of each element's (g, g) DOF block inside a CSR data
    array sharing the stiffness pattern.  The pattern is topology
    independent, so this is built once per problem."""

    def __init__(self, problem: FemProblem, pattern: sp.csr_matrix):
        pattern = pattern.tocsr()
        pattern.sort_indices()
        indptr, indices = pattern.indptr, pattern.indices
        self.flat = []
        for elems, dofs, *_ in _Groups.of(problem).groups:
            m, g = dofs.shape
            pos = np.empty((m, g, g), dtype=np.int64)
            for a in range(m):
                row_dofs = dofs[a]
                for r in range(g):
                    lo, hi = indptr[row_dofs[r]], indptr[row_dofs[r] + 1]
                    pos[a, r, :] = lo + np.searchsorted(indices[lo:hi], row_dofs)
            self.flat.append(pos)

    @staticmethod
    def of(problem: FemProblem, pattern: sp.csr_matrix) -> "_BlockIndex":
        cached = getattr(problem, "_fvtopo_blockidx", None)
        if cached is None:
            cached = _BlockIndex(problem, pattern)
            problem._fvtopo_blockidx = cached
        return cached

    def blocks(self, data: np.ndarray, group: int) -> np.ndarray:
        """(m, g, g) dense blocks of a patterned value array."""
        return data[self.flat[group]]


def _spectral_batches(problem: FemProblem, s: SelectiveInverse, x, u):
    """Yield per group: (elems, dofs, lam, w, c_i) of the element operators."""
    x = as_density(x, problem.n_elements)
    idx = _BlockIndex.of(problem, s.mat)
    s.mat.sort_indices()
    for gid, (elems, dofs, ksub0, ki, sqrt_i) in enumerate(_Groups.of(problem).groups):
        blocks = idx.blocks(s.mat.data, gid)
        a = np.einsum("ab,mbc,cd->mad", sqrt_i, blocks, sqrt_i, optimize=True)
        lam, phi = np.linalg.eigh(a)
        ue = u[dofs]
        v = ue @ sqrt_i
        w = np.einsum("mij,mi->mj", phi, v)
        c_i = 0.5 * np.einsum("mi,ij,mj->m", ue, ki, ue)
        yield elems, dofs, lam, w, c_i


def _mask_connective_solids(alpha, status, elems, lam, solid_sel):
    """Tag solid elements whose operator eigenvalue reaches 1."""
    lam_max = lam[:, -1]
    near = solid_sel & (lam_max >= 1.0 - _CONNECTIVE_TOL)
    status[elems[near]] = Status.MASKED_CONNECTIVE
    return near


# ---------------------------------------------------------------------------
# the five analyses


def sensitivity_naive(problem: FemProblem, x, allow_large: bool = False) -> SensitivityVector:
    """Exact sensitivities by solving every perturbed system.

    For each element the switched stiffness matrix is factorized from
    scratch; this is the reference the other analyses are judged against
    and is guarded to N <= 10000.
    """
    x = as_density(x, problem.n_elements)
    n = problem.n_elements
    if n > _SOLID_GUARD_LIMIT and not allow_large:
        raise ValueError(f"naive analysis guarded to N <= {_SOLID_GUARD_LIMIT}")
    f = problem.f
    k = problem.assemble(x)
    u_bar = factorize_spd(k).solve(f)
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    failures: dict[int, Exception] = {}
    for i in range(n):
        x2 = x.copy()
        x2[i] = 1 - x2[i]
        try:
            u2 = factorize_spd(problem.assemble(x2)).solve(f)
        except (ValueError, ArithmeticError) as exc:
            failures[i] = exc
            continue
        if x[i] == 0:
            alpha[i] = -0.5 * float(f @ (u_bar - u2))
        else:
            alpha[i] = -0.5 * float(f @ (u2 - u_bar))
    if failures:
        raise NaiveSensitivityError(failures)
    return SensitivityVector(alpha, status)


def sensitivity_foci(problem: FemProblem, x, u, eps_v: float = 1e-6) -> SensitivityVector:
    """First-order sensitivities: -eps_v/2 u.K_i.u on voids, -1/2 u.K_i.u
    on solids.  No solves beyond the equilibrium displacements."""
    if not 0.0 <= eps_v <= 1.0:
        raise ValueError("eps_v must lie in [0, 1]")
    x = as_density(x, problem.n_elements)
    alpha = np.zeros(problem.n_elements)
    status = np.zeros(problem.n_elements, dtype=np.int8)
    for elems, dofs, ksub0, ki, _ in _Groups.of(problem).groups:
        ue = u[dofs]
        c_i = 0.5 * np.einsum("mi,ij,mj->m", ue, ki, ue)
        solid = x[elems] == 1
        alpha[elems] = np.where(solid, -c_i, -eps_v * c_i)
    return SensitivityVector(alpha, status)


def sensitivity_hoci(
    problem: FemProblem,
    x,
    u,
    s: SelectiveInverse,
    q: int,
    void_mode: str = "zero",
) -> SensitivityVector:
    """Series sensitivities truncated at order q.

    Solid elements sum -1/2 v.[A]^{a-1}.v for a = 1..q, which always
    converges; the alternating void series converges only when |A| < 1, so
    voids are either forced to zero (void_mode="zero") or summed anyway
    with a per-element divergence flag (void_mode="skip").
    """
    if q < 1:
        raise ValueError("q must be at least 1")
    if void_mode not in ("zero", "skip"):
        raise ValueError("void_mode must be 'zero' or 'skip'")
    x = as_density(x, problem.n_elements)
    n = problem.n_elements
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    diverged = np.zeros(n, dtype=bool)
    for elems, dofs, lam, w, _ in _spectral_batches(problem, s, x, u):
        solid = x[elems] == 1
        # partial sums in the eigenbasis: repeated application of the
        # (diagonal) operator, never explicit powers
        ratio = np.where(solid[:, None], lam, -lam)
        if void_mode == "zero":
            ratio[~solid] = 0.0  # void rows are discarded, keep them finite
        term = w * w
        acc = term.copy()
        for _ in range(q - 1):
            term = term * ratio
            acc += term
        val = -0.5 * acc.sum(axis=1)
        alpha[elems] = np.where(solid, val, val if void_mode == "skip" else 0.0)
        if void_mode == "zero":
            status[elems[~solid]] = Status.ZEROED_VOID
        else:
            diverged[elems] = (~solid) & (lam[:, -1] >= 1.0)
        _mask_connective_solids(alpha, status, elems, lam, solid)
    return SensitivityVector(alpha, status, diverged=diverged if void_mode == "skip" else None)


def sensitivity_woodbury(problem: FemProblem, x, u, s: SelectiveInverse) -> SensitivityVector:
    """Exact sensitivities: -1/2 v.[I +/- A]^-1.v per element (+ voids,
    - solids), evaluated in the eigenbasis of A.  Solid elements whose
    largest eigenvalue reaches 1 are connective (removal nearly singular)
    and are tagged masked."""
    x = as_density(x, problem.n_elements)
    n = problem.n_elements
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    for elems, dofs, lam, w, _ in _spectral_batches(problem, s, x, u):
        solid = x[elems] == 1
        denom = np.where(solid[:, None], 1.0 - lam, 1.0 + lam)
        # a connective element can round 1 - lam to <= 0; its magnitude is
        # 1/eps_k-scaled and meaningless, keep it finite
        denom = np.where(denom <= 0.0, np.finfo(float).tiny ** 0.5, denom)
        alpha[elems] = -0.5 * (w * w / denom).sum(axis=1)
        _mask_connective_solids(alpha, status, elems, lam, solid)
    return SensitivityVector(alpha, status)


@dataclass(frozen=True)
class CgmCase:
    """Initial conditions, step count and preconditioning of a cgm run.

    case 1: u0 = 0, d0 = M^-1 f, compliance read from the load estimator;
    case 2: u0 = u_bar, d0 = -M^-1 dK u_bar, displacement estimator;
    case 3: u0 = 0, d0 = u_bar, either estimator (load one by default).
    """

    case: int
    steps: int
    preconditioner: str = "jacobi"  # none | jacobi | exact
    estimator: str | None = None  # d_f | d_u

    def __post_init__(self):
        if self.case not in (1, 2, 3):
            raise ValueError("case must be 1, 2 or 3")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.preconditioner not in ("none", "jacobi", "exact"):
            raise ValueError("preconditioner must be none, jacobi or exact")
        est = self.estimator
        if self.case == 1 and est not in (None, "d_f"):
            raise ValueError("case 1 uses the d_f estimator")
        if self.case == 2 and est not in (None, "d_u"):
            raise ValueError("case 2 uses the d_u estimator")
        if self.case == 3 and est not in (None, "d_f", "d_u"):
            raise ValueError("estimator must be d_f or d_u")

    @property
    def effective_estimator(self) -> str:
        if self.estimator is not None:
            return self.estimator
        return {1: "d_f", 2: "d_u", 3: "d_f"}[self.case]


def _preconditioner_for(case: CgmCase, k, dofs, delta, fact):
    if case.preconditioner == "none":
        return IdentityPreconditioner()
    if case.preconditioner == "jacobi":
        d = k.diagonal()
        d[dofs] += np.diag(delta)
        return JacobiPreconditioner(d)
    if fact is None:
        raise ValueError("exact preconditioning needs a factorization of Kbar")
    return FactorPreconditioner(fact)


def sensitivity_cgm(
    problem: FemProblem,
    x,
    u,
    case: CgmCase,
    k: sp.csr_matrix | None = None,
    fact: Factorization | None = None,
    force_generic: bool = False,
) -> SensitivityVector:
    """Sensitivities from m conjugate-gradient steps per element.

    The assembled matrix is shared across elements; each perturbed system
    applies +/- K_i as a rank-limited overlay.  Case 2 with a single step
    and a diagonal (or no) preconditioner runs through a vectorized closed
    form; everything else runs the general recursion element by element.
    A breakdown flags the element and leaves the others untouched.
    """
    x = as_density(x, problem.n_elements)
    if k is None:
        k = problem.assemble(x)
    if case.preconditioner == "exact" and fact is None:
        fact = factorize_spd(k)
    if (
        not force_generic
        and case.case == 2
        and case.steps == 1
        and case.preconditioner in ("none", "jacobi")
    ):
        return _cgm_case2_one_step(problem, x, u, k, case)

    n = problem.n_elements
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    failed = np.zeros(n, dtype=bool)
    f = problem.f
    est = case.effective_estimator
    for i in range(n):
        dofs = problem.mesh.elem_dofs[i]
        ki = problem.elem_variation_matrix(i)
        sign = 1.0 if x[i] == 0 else -1.0
        delta = sign * ki
        op = RankUpdateOperator(k, dofs, delta)
        m_pre = _preconditioner_for(case, k, dofs, delta, fact)
        if case.case == 1:
            u0 = np.zeros_like(f)
            d0 = m_pre.apply(f)
        elif case.case == 2:
            u0 = u.copy()
            b = np.zeros_like(f)
            b[dofs] = -sign * (ki @ u[dofs])
            d0 = m_pre.apply(b)
        else:
            u0 = np.zeros_like(f)
            d0 = u.copy()
        try:
            um, _, _ = pcg(op, f, u0, d0, m=case.steps, preconditioner=m_pre, tau=0.0)
        except PcgBreakdownError:
            failed[i] = True
            alpha[i] = np.nan
            continue
        if est == "d_f":
            dc = 0.5 * float(f @ (um - u))
        else:
            dc = -0.5 * float((ki @ u[dofs]) @ um[dofs]) * sign
        alpha[i] = dc if x[i] == 0 else -dc
    return SensitivityVector(alpha, status, failed=failed if failed.any() else None)


def _cgm_case2_one_step(problem, x, u, k, case: CgmCase) -> SensitivityVector:
    """Vectorized one-step case-2 estimate (the closed form of the first
    recursion step, evaluated per element from local blocks of Kbar)."""
    idx = _BlockIndex.of(problem, k)
    k = k.tocsr()
    k.sort_indices()
    kdiag = k.diagonal()
    n = problem.n_elements
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    for gid, (elems, dofs, ksub0, ki, _) in enumerate(_Groups.of(problem).groups):
        sign = np.where(x[elems] == 0, 1.0, -1.0)[:, None]
        ue = u[dofs]
        ki_u = ue @ ki
        c_i = 0.5 * np.einsum("mi,mi->m", ue, ki_u)
        b = -sign * ki_u
        if case.preconditioner == "jacobi":
            mdiag = kdiag[dofs] + sign * np.diag(ki)[None, :]
            v_m = b / mdiag
        else:
            v_m = b
        kblocks = idx.blocks(k.data, gid) + sign[:, :, None] * ki[None, :, :]
        b0 = np.einsum("mi,mi->m", b, v_m)
        b1 = np.einsum("mi,mij,mj->m", v_m, kblocks, v_m)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(b1 > 0.0, b0 * b0 / (2.0 * b1), 0.0)
        alpha[elems] = np.where(x[elems] == 1, -(c_i + corr), -(c_i - corr))
    return SensitivityVector(alpha, status)


def cgm_closed_form(
    problem: FemProblem,
    x,
    u,
    case: CgmCase,
    k: sp.csr_matrix | None = None,
    fact: Factorization | None = None,
) -> SensitivityVector:
    """Explicit 1- and 2-step sensitivity expressions (algebraic unrollings
    of the conjugate-gradient recursion for the three initial conditions).

    Matches :func:`sensitivity_cgm` with the same case to rounding.  Zero
    denominators with a nonzero numerator flag the element as failed
    (degenerate Krylov space); the strain-free b = 0 case collapses to the
    local first-order value.
    """
    if case.steps not in (1, 2):
        raise ValueError("closed forms exist for 1 or 2 steps")
    x = as_density(x, problem.n_elements)
    if k is None:
        k = problem.assemble(x)
    if case.preconditioner == "exact" and fact is None:
        fact = factorize_spd(k)
    f = problem.f
    n = problem.n_elements
    alpha = np.zeros(n)
    status = np.zeros(n, dtype=np.int8)
    failed = np.zeros(n, dtype=bool)
    c_bar = 0.5 * float(u @ f)

    for i in range(n):
        dofs = problem.mesh.elem_dofs[i]
        ki = problem.elem_variation_matrix(i)
        void = x[i] == 0
        sign = 1.0 if void else -1.0
        delta = sign * ki
        m_pre = _preconditioner_for(case, k, dofs, delta, fact)

        def kk(v):  # K + dK applied to a full vector
            out = k @ v
            out[dofs] += delta @ v[dofs]
            return out

        ki_u = ki @ u[dofs]
        c_i = 0.5 * float(u[dofs] @ ki_u)

        if case.case == 1:
            v_m = m_pre.apply(f)
            f0 = float(f @ v_m)
            v_k = kk(v_m)
            f1 = float(v_k @ v_m)
            if case.steps == 1:
                ratio, ok = _safe_ratio(f0 * f0, 2.0 * f1)
                val = ratio
            else:
                v_l = m_pre.apply(v_k)
                f2 = float(v_k @ v_l)
                f3 = float(kk(v_l) @ v_l)
                num = f0 * f0 * f3 - 2.0 * f0 * f1 * f2 + f1**3
                den = 2.0 * (f1 * f3 - f2 * f2)
                val, ok = _safe_ratio(num, den)
            alpha[i] = -(c_bar - val) if void else -(val - c_bar)
            failed[i] = not ok
        elif case.case == 2:
            b = np.zeros_like(f)
            b[dofs] = -sign * ki_u
            v_m = m_pre.apply(b)
            b0 = float(b @ v_m)
            v_k = kk(v_m)
            b1 = float(v_k @ v_m)
            if case.steps == 1:
                corr, ok = _safe_ratio(b0 * b0, 2.0 * b1)
            else:
                v_l = m_pre.apply(v_k)
                b2 = float(v_k @ v_l)
                b3 = float(kk(v_l) @ v_l)
                num = b0 * b0 * b3 - 2.0 * b0 * b1 * b2 + b1**3
                den = 2.0 * (b1 * b3 - b2 * b2)
                corr, ok = _safe_ratio(num, den)
            alpha[i] = -(c_i - corr) if void else -(c_i + corr)
            failed[i] = not ok
        else:
            c_t = c_bar + sign * c_i
            if c_t == 0.0:
                failed[i] = True
                alpha[i] = np.nan
                continue
            if case.steps == 1:
                alpha[i] = -(c_bar / c_t) * c_i
            else:
                b = np.zeros_like(f)
                b[dofs] = -sign * ki_u
                z = f - b
                gvec = (c_bar / c_t) * z - f
                v_m = m_pre.apply(gvec)
                zg0 = float(v_m @ z)
                g0 = float(v_m @ gvec)
                g1 = float(v_m @ kk(v_m))
                term, ok = _safe_ratio(c_t * g0 * g0, 2.0 * c_t * g1 - zg0 * zg0)
                alpha[i] = -(c_bar / c_t) * c_i + (term if void else -term)
                failed[i] = not ok
    return SensitivityVector(alpha, status, failed=failed if failed.any() else None)


def _safe_ratio(num: float, den: float) -> tuple[float, bool]:
    if den != 0.0:
        return num / den, True
    if num == 0.0:
        return 0.0, True
    return np.nan, False


# ---------------------------------------------------------------------------
# operators, diagnostics and bounds


def element_operator(
    problem: FemProblem, i: int, s: SelectiveInverse, x, u
) -> ElementOperator:
    """Spectral data of A_i for one element (see :class:`ElementOperator`)."""
    x = as_density(x, problem.n_elements)
    dofs = problem.mesh.elem_dofs[i]
    sqrt_i = problem.elem_variation_sqrt(i)
    a = sqrt_i @ s.block(dofs) @ sqrt_i
    a = 0.5 * (a + a.T)
    lam, phi = np.linalg.eigh(a)
    v = sqrt_i @ u[dofs]
    return ElementOperator(
        element=i,
        is_solid=bool(x[i] == 1),
        a=a,
        v=v,
        lam=lam,
        phi=phi,
        w=phi.T @ v,
    )


def complement_operator(problem: FemProblem, i: int, x, u=None) -> ElementOperator:
    """Spectral data of B_i = sqrt(K_i) R^-1 sqrt(K_i), where R is the
    stiffness with element i switched.  Its eigenvalues L relate to those
    of A_i by lam = L / (1 - L) for voids and lam = L / (1 + L) for
    solids."""
    x = as_density(x, problem.n_elements)
    x2 = x.copy()
    x2[i] = 1 - x2[i]
    r_fact = factorize_spd(problem.assemble(x2))
    dofs = problem.mesh.elem_dofs[i]
    g = dofs.size
    rhs = np.zeros((problem.n_dofs, g))
    rhs[dofs, np.arange(g)] = 1.0
    rinv_block = r_fact.solve(rhs)[dofs, :]
    sqrt_i = problem.elem_variation_sqrt(i)
    b = sqrt_i @ (0.5 * (rinv_block + rinv_block.T)) @ sqrt_i
    b = 0.5 * (b + b.T)
    lam, phi = np.linalg.eigh(b)
    v = sqrt_i @ u[dofs] if u is not None else np.zeros(g)
    return ElementOperator(
        element=i, is_solid=bool(x[i] == 1), a=b, v=v, lam=lam, phi=phi, w=phi.T @ v
    )


def error_bounds(op: ElementOperator, q: int) -> tuple[float, float]:
    """Truncation-error bounds for the first-order (void) and order-q
    series (solid) estimates: C_i * a/(1+a) and C_i * a^q/(1-a) with
    a = |A_i|.  A solid element with a >= 1 contradicts the spectral bound
    and raises."""
    if q < 1:
        raise ValueError("q must be at least 1")
    a = op.norm
    c_i = 0.5 * float(op.v @ op.v)
    foci_bound = c_i * a / (1.0 + a)
    if a < 1.0:
        hoci_bound = c_i * a**q / (1.0 - a)
    elif op.is_solid:
        raise InternalConsistencyError(f"solid element with |A| = {a:g} >= 1")
    else:
        hoci_bound = np.inf
    return foci_bound, hoci_bound


def norm_map(problem: FemProblem, x, s: SelectiveInverse) -> np.ndarray:
    """Spectral norm of A_i for every element."""
    x = as_density(x, problem.n_elements)
    u = np.zeros(problem.n_dofs)
    norms = np.zeros(problem.n_elements)
    for elems, dofs, lam, w, _ in _spectral_batches(problem, s, x, u):
        norms[elems] = lam[:, -1]
    return norms


# ---------------------------------------------------------------------------
# void handling


def disconnected_void_mask(problem: FemProblem, x) -> np.ndarray:
    """Void elements with no solid face/edge/corner neighbor.  Switching
    them cannot change the compliance, so their sensitivity is zero by
    construction."""
    x = as_density(x, problem.n_elements)
    neighbors = problem.mesh.element_neighbors
    out = np.zeros(problem.n_elements, dtype=bool)
    for i in range(problem.n_elements):
        if x[i] == 0:
            nb = neighbors[i]
            out[i] = not np.any(x[nb] == 1) if nb.size else True
    return out


def zero_disconnected_voids(sv: SensitivityVector, problem: FemProblem, x) -> SensitivityVector:
    mask = disconnected_void_mask(problem, x)
    sv.alpha[mask] = 0.0
    sv.status[mask] = Status.FORCED_ZERO_DISCONNECTED
    return sv


def zero_all_voids(sv: SensitivityVector, x) -> SensitivityVector:
    x = np.asarray(x)
    void = x == 0
    sv.alpha[void] = 0.0
    sv.status[void] = Status.ZEROED_VOID
    return sv
