"""Selective inverse: entries of K^-1 on the sparsity pattern of K.

The full computation is exhaustive (one solve per matrix column, batched
through a shared factorization); after a low-rank stiffness change the
stored entries are updated in place of a recomputation, using one dense
core solve of the changed-DOF dimension plus a bilinear correction per
patterned entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from fvtopo.linalg import Factorization

__all__ = ["SelectiveInverse", "selective_inverse_full", "selective_inverse_update"]


@dataclass
class SelectiveInverse:
    """Values of K^-1 restricted to the symmetric pattern of K.

    ``mat`` is a CSR matrix whose sparsity pattern equals the pattern of K
    and whose stored values are the corresponding entries of K^-1.  Element
    DOF blocks are always fully inside the pattern because the DOFs of one
    element are mutually adjacent.
    """

    mat: sp.csr_matrix

    @property
    def shape(self):
        return self.mat.shape

    def block(self, dofs: np.ndarray) -> np.ndarray:
        """Dense (g, g) block of K^-1 on the given DOF ids."""
        return self.mat[np.ix_(dofs, dofs)].toarray()

    def symmetrize(self):
        """Average values across the pattern diagonal in place."""
        t = self.mat.T.tocsr()
        t.sort_indices()
        self.mat.sort_indices()
        self.mat.data = 0.5 * (self.mat.data + t.data)

    def copy(self) -> "SelectiveInverse":
        return SelectiveInverse(self.mat.copy())


def _pattern_like(k: sp.spmatrix) -> sp.csr_matrix:
    p = sp.csr_matrix(k, copy=True)
    p.sort_indices()
    p.sum_duplicates()
    return p


def selective_inverse_full(
    fact: Factorization, pattern: sp.spmatrix, batch: int = 1024
) -> SelectiveInverse:
    """Compute K^-1 on the pattern by solving per-column identity systems.

    For each column touched by the pattern, K t = e_col is solved and the
    patterned entries of t are kept.  Columns are batched through the
    factorization; peak memory is G * batch doubles.
    """
    out = _pattern_like(pattern)
    g = out.shape[0]
    indptr, indices = out.indptr, out.indices
    data = np.empty_like(out.data, dtype=float)
    for start in range(0, g, batch):
        stop = min(start + batch, g)
        sol = fact.solve_identity_block(np.arange(start, stop))
        lo, hi = indptr[start], indptr[stop]
        within = np.repeat(np.arange(stop - start), np.diff(indptr[start : stop + 1]))
        data[lo:hi] = sol[indices[lo:hi], within]
    out.data = data
    # out was filled row-wise treating rows as columns; K^-1 is symmetric so
    # this is the transpose harvest -- average both orientations to tighten
    # the symmetry invariant.
    s = SelectiveInverse(out)
    s.symmetrize()
    return s


def selective_inverse_update(
    s: SelectiveInverse,
    fact: Factorization,
    delta_dofs: np.ndarray,
    delta: np.ndarray,
) -> SelectiveInverse:
    """Selective inverse of K + dK from the one of K.

    ``fact`` factors the *old* K; ``delta`` is the dense symmetric block of
    dK on ``delta_dofs``.  Exactly len(delta_dofs) full-size systems are
    solved to form the valued rows of T = I_d K^-1; the core
    I + K^-1[d, d] dK is inverted at the changed-DOF dimension and every
    patterned entry (a, b) receives the bilinear correction
    -t_a . Q . t_b.  Raises if the core is singular (K + dK singular).
    """
    delta_dofs = np.asarray(delta_dofs)
    delta = np.asarray(delta, dtype=float)
    gd = delta_dofs.size
    if delta.shape != (gd, gd):
        raise ValueError("delta block shape does not match delta_dofs")
    g = s.shape[0]

    rhs = np.zeros((g, gd))
    rhs[delta_dofs, np.arange(gd)] = 1.0
    w = fact.solve(rhs)  # columns of K^-1 at the changed DOFs

    core = np.eye(gd) + w[delta_dofs, :] @ delta
    try:
        q = delta @ np.linalg.inv(core)
    except np.linalg.LinAlgError:
        raise SingularUpdateError("update core is singular: K + dK is singular")
    if not np.all(np.isfinite(q)):
        raise SingularUpdateError("update core is near-singular: K + dK is near-singular")

    out = s.copy()
    m = out.mat
    coo = m.tocoo()
    p = w @ q  # (G, gd)
    m.data = m.data - np.einsum("ij,ij->i", p[coo.row], w[coo.col])
    res = SelectiveInverse(m)
    res.symmetrize()
    return res


class SingularUpdateError(np.linalg.LinAlgError):
    """The low-rank update would make the matrix singular."""
