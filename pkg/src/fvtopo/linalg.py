"""Sparse SPD factorization, preconditioners and conjugate gradients.

The direct solver is CHOLMOD (via cvxopt); its supernodal solves stay fast
when many right-hand sides are pushed through one factorization, which the
selective-inverse sweep depends on.  The conjugate-gradient routine takes
caller-supplied initial guess *and* initial direction, returns the current
direction so a run can be continued, and updates the residual recursively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from cvxopt import cholmod, matrix as _cvxmat, spmatrix as _cvxsp

__all__ = [
    "Factorization",
    "factorize_spd",
    "jacobi_preconditioner",
    "IdentityPreconditioner",
    "JacobiPreconditioner",
    "FactorPreconditioner",
    "RankUpdateOperator",
    "pcg",
    "CgmState",
    "NotSpdError",
    "SingularMatrixError",
    "PcgBreakdownError",
]


class NotSpdError(ValueError):
    """The matrix is symmetric but not positive definite."""


class SingularMatrixError(ValueError):
    """The matrix is numerically singular."""


class PcgBreakdownError(RuntimeError):
    """d^T K d <= 0: the operator is not SPD or the direction degenerated."""


def _to_cvx_lower(k: sp.spmatrix) -> _cvxsp:
    coo = sp.tril(k, format="coo")
    n = k.shape[0]
    return _cvxsp(
        _cvxmat(np.asarray(coo.data, dtype=float)),
        _cvxmat(coo.row.astype(np.int32)),
        _cvxmat(coo.col.astype(np.int32)),
        size=(n, n),
    )


class Factorization:
    """Reusable sparse Cholesky solve handle for an SPD matrix.

    ``n_rhs_solved`` counts right-hand-side columns pushed through the
    factorization (tests assert solve budgets structurally with it).
    """

    def __init__(self, k: sp.spmatrix):
        if k.shape[0] != k.shape[1]:
            raise ValueError("matrix must be square")
        self.shape = k.shape
        self.n_rhs_solved = 0
        self._buffers: dict[int, tuple] = {}
        lower = _to_cvx_lower(k)
        self._factor = cholmod.symbolic(lower)
        try:
            cholmod.numeric(lower, self._factor)
        except ArithmeticError:
            self._diagnose_failure(k)

    @staticmethod
    def _diagnose_failure(k: sp.spmatrix):
        try:
            lu = sp.linalg.splu(k.tocsc(), permc_spec="COLAMD")
            u_diag = lu.U.diagonal()
            if np.any(u_diag == 0.0):
                raise SingularMatrixError("matrix is singular (zero pivot)")
        except RuntimeError as exc:
            raise SingularMatrixError(f"matrix is singular ({exc})") from None
        raise NotSpdError("matrix is not positive definite (nonpositive pivot)")

    def _buffer(self, cols: int):
        cached = self._buffers.get(cols)
        if cached is None:
            buf = _cvxmat(np.zeros((self.shape[0], cols)))
            cached = (buf, np.asarray(buf))  # write-through view
            self._buffers[cols] = cached
        return cached

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve K x = b for a vector or a matrix of stacked columns."""
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        cols = 1 if vec else b.shape[1]
        buf, view = self._buffer(cols)
        view[:, :] = b.reshape(self.shape[0], cols)
        cholmod.solve(self._factor, buf)
        self.n_rhs_solved += cols
        out = view.copy()
        return out[:, 0] if vec else out

    def solve_identity_block(self, cols: np.ndarray) -> np.ndarray:
        """Solve K x = e_col for a block of columns at once.

        Returns a (G, len(cols)) view into a reused buffer: consume it
        before the next solve on this factorization.
        """
        cols = np.asarray(cols)
        buf, view = self._buffer(cols.size)
        view[:, :] = 0.0
        view[cols, np.arange(cols.size)] = 1.0
        cholmod.solve(self._factor, buf)
        self.n_rhs_solved += cols.size
        return view


def factorize_spd(k: sp.spmatrix) -> Factorization:
    """Factor a sparse SPD matrix for repeated solves."""
    return Factorization(k)


class IdentityPreconditioner:
    def apply(self, v: np.ndarray) -> np.ndarray:
        return v.copy()


class JacobiPreconditioner:
    """Diagonal preconditioner: apply() divides componentwise by diag(K)."""

    def __init__(self, diag: np.ndarray):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag == 0.0):
            raise ValueError("Jacobi preconditioner requires a nonzero diagonal")
        self.diag = diag

    def apply(self, v: np.ndarray) -> np.ndarray:
        return v / self.diag


class FactorPreconditioner:
    """Exact preconditioner backed by a factorization (M = K_factored)."""

    def __init__(self, fact: Factorization):
        self.fact = fact

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.fact.solve(v)


def jacobi_preconditioner(k) -> JacobiPreconditioner:
    """Jacobi (diagonal) preconditioner of a sparse matrix or diagonal."""
    diag = k.diagonal() if sp.issparse(k) else np.asarray(k, dtype=float)
    if np.any(diag <= 0.0):
        raise ValueError("diagonal entries must be strictly positive")
    return JacobiPreconditioner(diag)


class RankUpdateOperator:
    """Operator K + sign * K_i with K_i supported on a few DOFs.

    Shares the assembled K across elements; the elemental overlay is applied
    by gather/scatter so no re-assembly happens per element.
    """

    def __init__(self, k: sp.csr_matrix, dofs: np.ndarray, delta: np.ndarray):
        self.k = k
        self.dofs = np.asarray(dofs)
        self.delta = np.asarray(delta, dtype=float)
        self.shape = k.shape

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = self.k @ v
        out[self.dofs] += self.delta @ v[self.dofs]
        return out

    def diagonal(self) -> np.ndarray:
        d = self.k.diagonal()
        d[self.dofs] += np.diag(self.delta)
        return d


def _as_matvec(op):
    if hasattr(op, "matvec"):
        return op.matvec
    if sp.issparse(op) or isinstance(op, np.ndarray):
        return lambda v: op @ v
    raise TypeError(f"cannot interpret {type(op)!r} as a linear operator")


@dataclass
class CgmState:
    """Snapshot of a conjugate-gradient run after k steps."""

    u: np.ndarray
    d: np.ndarray
    g: np.ndarray
    k: int


def pcg(op, f, u0, d0, m, preconditioner=None, tau=0.0, on_step=None):
    """Preconditioned conjugate gradients with explicit initial direction.

    Runs at most ``m`` steps of the recursion

        e_k = K d_k
        mu_k = -d_k.g_k / d_k.e_k
        u_{k+1} = u_k + mu_k d_k ;  g_{k+1} = g_k + mu_k e_k
        q_k = M^{-1} g_{k+1}
        beta_k = e_k.q_k / d_k.e_k
        d_{k+1} = -q_k + beta_k d_k

    and returns ``(u, d, steps_taken)``.  If the residual norm drops below
    ``tau`` the current iterate and direction are returned early with the
    step count reached.  ``on_step(state)`` is invoked after every step
    with a :class:`CgmState`, which supports incremental studies.
    """
    matvec = _as_matvec(op)
    M = preconditioner if preconditioner is not None else IdentityPreconditioner()
    u = np.array(u0, dtype=float)
    d = np.array(d0, dtype=float)
    g = matvec(u) - f
    for k in range(m):
        if np.linalg.norm(g) < tau:
            return u, d, k
        e = matvec(d)
        de = float(d @ e)
        if de <= 0.0:
            raise PcgBreakdownError(f"d.K d = {de:g} at step {k}")
        mu = -float(d @ g) / de
        u = u + mu * d
        g = g + mu * e
        q = M.apply(g)
        beta = float(e @ q) / de
        d = -q + beta * d
        if on_step is not None:
            on_step(CgmState(u=u, d=d, g=g, k=k + 1))
    return u, d, m
