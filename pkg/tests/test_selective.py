"""Selective inverse: full computation and low-rank updates."""

import numpy as np
import pytest
import scipy.sparse as sp

from fvtopo.linalg import factorize_spd
from fvtopo.mesh import FemProblem, Material, Mesh, point_load
from fvtopo.selective import (
    SingularUpdateError,
    selective_inverse_full,
    selective_inverse_update,
)

from conftest import solved


def mesh_problem(nx, ny, eps_k=1e-3):
    fixed = [(0, r, c) for r in range(ny + 1) for c in (0, 1)]
    mesh = Mesh(nx, ny, 1.0, 1.0, fixed=fixed)
    f = point_load(mesh, [(mesh.node_at(nx, ny), 1, -1.0)])
    return FemProblem(mesh, Material(1.0, 0.3), f, eps_k=eps_k)


def switch_delta(problem, x, elems, signs):
    """Aggregate elemental stiffness change on the union of element DOFs."""
    dofs = np.unique(np.concatenate([problem.mesh.elem_dofs[e] for e in elems]))
    pos = {d: i for i, d in enumerate(dofs)}
    delta = np.zeros((dofs.size, dofs.size))
    for e, sgn in zip(elems, signs):
        loc = np.array([pos[d] for d in problem.mesh.elem_dofs[e]])
        delta[np.ix_(loc, loc)] += sgn * problem.elem_variation_matrix(e)
    return dofs, delta


class TestFull:
    def test_diagonal_matrix(self):
        k = sp.diags([2.0, 4.0, 5.0]).tocsr()
        s = selective_inverse_full(factorize_spd(k), k)
        np.testing.assert_allclose(s.mat.diagonal(), [0.5, 0.25, 0.2], rtol=1e-12)

    def test_two_by_two_closed_form(self):
        k = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        s = selective_inverse_full(factorize_spd(k), k)
        np.testing.assert_allclose(
            s.mat.toarray(), np.array([[2 / 3, -1 / 3], [-1 / 3, 2 / 3]]), rtol=1e-12
        )

    def test_matches_dense_inverse_on_pattern(self):
        p = mesh_problem(4, 4)
        x = np.ones(p.n_elements, dtype=np.int8)
        k = p.assemble(x)
        s = selective_inverse_full(factorize_spd(k), k)
        kinv = np.linalg.inv(k.toarray())
        coo = s.mat.tocoo()
        ref = kinv[coo.row, coo.col]
        np.testing.assert_allclose(coo.data, ref, rtol=1e-9, atol=1e-9 * np.abs(ref).max())

    def test_element_block_is_in_pattern(self):
        p = mesh_problem(3, 3)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s = selective_inverse_full(fact, k)
        kinv = np.linalg.inv(k.toarray())
        for e in range(p.n_elements):
            dofs = p.mesh.elem_dofs[e]
            np.testing.assert_allclose(
                s.block(dofs), kinv[np.ix_(dofs, dofs)], rtol=1e-9, atol=1e-12
            )

    def test_symmetry(self):
        p = mesh_problem(4, 3)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s = selective_inverse_full(fact, k)
        np.testing.assert_allclose(s.mat.toarray(), s.mat.toarray().T, rtol=1e-10)


class TestUpdate:
    def test_zero_delta_is_identity_operation(self):
        p = mesh_problem(3, 2)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s = selective_inverse_full(fact, k)
        dofs = p.mesh.elem_dofs[0]
        s2 = selective_inverse_update(s, fact, dofs, np.zeros((dofs.size, dofs.size)))
        np.testing.assert_allclose(s2.mat.toarray(), s.mat.toarray(), rtol=1e-12)

    def test_remove_then_readd_is_involution(self):
        p = mesh_problem(3, 3)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s0 = selective_inverse_full(fact, k)
        dofs, delta = switch_delta(p, x, [4], [-1.0])
        s1 = selective_inverse_update(s0, fact, dofs, delta)
        x1 = x.copy()
        x1[4] = 0
        k1, fact1, _ = solved(p, x1)
        s2 = selective_inverse_update(s1, fact1, dofs, -delta)
        np.testing.assert_allclose(
            s2.mat.toarray(), s0.mat.toarray(), rtol=1e-8, atol=1e-8 * np.abs(s0.mat.data).max()
        )

    def test_update_equals_recompute_random_switches(self, rng):
        p = mesh_problem(4, 3)
        n = p.n_elements
        for _ in range(50):
            x = (rng.random(n) < 0.8).astype(np.int8)
            k, fact, _ = solved(p, x)
            s = selective_inverse_full(fact, k)
            e = int(rng.integers(0, n))
            sgn = -1.0 if x[e] == 1 else 1.0
            dofs, delta = switch_delta(p, x, [e], [sgn])
            s_upd = selective_inverse_update(s, fact, dofs, delta)
            x2 = x.copy()
            x2[e] = 1 - x2[e]
            k2, fact2, _ = solved(p, x2)
            s_ref = selective_inverse_full(fact2, k2)
            np.testing.assert_allclose(
                s_upd.mat.toarray(),
                s_ref.mat.toarray(),
                rtol=1e-8,
                atol=1e-8 * np.abs(s_ref.mat.data).max(),
            )

    def test_aggregate_equals_sequential(self, rng):
        p = mesh_problem(4, 4)
        n = p.n_elements
        for _ in range(10):
            x = (rng.random(n) < 0.8).astype(np.int8)
            k, fact, _ = solved(p, x)
            s = selective_inverse_full(fact, k)
            elems = rng.choice(n, size=3, replace=False)
            signs = [-1.0 if x[e] == 1 else 1.0 for e in elems]

            dofs, delta = switch_delta(p, x, elems, signs)
            s_agg = selective_inverse_update(s, fact, dofs, delta)

            s_seq = s
            x_seq = x.copy()
            fact_seq = fact
            for e, sgn in zip(elems, signs):
                d1, delta1 = switch_delta(p, x_seq, [e], [sgn])
                s_seq = selective_inverse_update(s_seq, fact_seq, d1, delta1)
                x_seq[e] = 1 - x_seq[e]
                _, fact_seq, _ = solved(p, x_seq)

            np.testing.assert_allclose(
                s_agg.mat.toarray(),
                s_seq.mat.toarray(),
                rtol=1e-8,
                atol=1e-8 * np.abs(s_agg.mat.data).max(),
            )
            x2 = x.copy()
            for e in elems:
                x2[e] = 1 - x2[e]
            k2, fact2, _ = solved(p, x2)
            s_ref = selective_inverse_full(fact2, k2)
            np.testing.assert_allclose(
                s_agg.mat.toarray(),
                s_ref.mat.toarray(),
                rtol=1e-8,
                atol=1e-8 * np.abs(s_ref.mat.data).max(),
            )

    def test_update_solve_budget_is_delta_dimension(self):
        p = mesh_problem(4, 3)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s = selective_inverse_full(fact, k)
        before = fact.n_rhs_solved
        dofs, delta = switch_delta(p, x, [5], [-1.0])
        selective_inverse_update(s, fact, dofs, delta)
        assert fact.n_rhs_solved - before == dofs.size
        assert dofs.size < p.n_dofs

    def test_symmetry_preserved(self, rng):
        p = mesh_problem(4, 3)
        x = np.ones(p.n_elements, dtype=np.int8)
        k, fact, _ = solved(p, x)
        s = selective_inverse_full(fact, k)
        dofs, delta = switch_delta(p, x, [3], [-1.0])
        s2 = selective_inverse_update(s, fact, dofs, delta)
        a = s2.mat.toarray()
        np.testing.assert_allclose(a, a.T, rtol=1e-10, atol=1e-10 * np.abs(a).max())

    def test_singular_update_reported(self):
        k = sp.diags([1.0, 1.0]).tocsr()
        s = selective_inverse_full(factorize_spd(k), k)
        # dK = -I makes K + dK singular
        with pytest.raises((SingularUpdateError, np.linalg.LinAlgError)):
            selective_inverse_update(s, factorize_spd(k), np.array([0, 1]), -np.eye(2))
