"""Scheduler, subproblem, filter, momentum and full-loop tests."""


import numpy as np
import pytest

from fvtopo.mesh import Mesh, volume
from fvtopo.optimize import (
    InfeasibleMoveError,
    MoveConstraints,
    OptimizerConfig,
    SensitivityMethod,
    conic_filter,
    momentum_blend,
    optimize,
    schedule,
    solve_subproblem,
)
from fvtopo.problems import cantilever, tie_beam
from fvtopo.sensitivity import SensitivityVector, Status, sensitivity_naive

from conftest import mild_instance


def sv_of(alpha, masked=()):
    alpha = np.asarray(alpha, dtype=float)
    status = np.zeros(alpha.size, dtype=np.int8)
    for i in masked:
        status[i] = Status.MASKED_CONNECTIVE
    return SensitivityVector(alpha, status)


class TestSchedule:
    def test_shrinking_phase_match(self):
        cfg = OptimizerConfig(er=0.01, ar_max=0.02, target_volume_fraction=0.5)
        mc = schedule(30000, cfg, current_volume=30000, target_volume=15000)
        assert mc.vv == -300
        assert mc.tv_max == 1500

    def test_constant_volume_phase(self):
        cfg = OptimizerConfig(er=0.01, ar_max=0.02, target_volume_fraction=0.5)
        mc = schedule(30000, cfg, current_volume=15000, target_volume=15000)
        assert mc.vv == 0
        assert mc.tv_max == 1200

    def test_no_overshoot(self):
        cfg = OptimizerConfig(er=0.01, ar_max=0.02)
        mc = schedule(30000, cfg, current_volume=15005, target_volume=15000)
        assert mc.vv == -5
        assert mc.tv_max >= 5

    def test_growth_toward_target(self):
        cfg = OptimizerConfig(er=0.01, ar_max=0.0)
        mc = schedule(1000, cfg, current_volume=490, target_volume=500)
        assert mc.vv == 10

    def test_constraints_validation(self):
        with pytest.raises(ValueError):
            MoveConstraints(vv=-3, tv_max=2)


class TestSubproblem:
    def test_no_move(self):
        y = solve_subproblem(sv_of([1.0, -2.0]), np.array([1, 0]), MoveConstraints(0, 0))
        assert np.all(y == 0)

    def test_worked_example_with_discretionary_swap(self):
        # solids carry (5, 4, 3), voids carry (1, 2, 6); removing one and
        # swapping one more strictly improves the objective
        alpha = np.array([5.0, 4.0, 3.0, 1.0, 2.0, 6.0])
        x = np.array([1, 1, 1, 0, 0, 0])
        y = solve_subproblem(sv_of(alpha), x, MoveConstraints(vv=-1, tv_max=3))
        assert y.tolist() == [-1, -1, 0, 1, 0, 0]

    def test_equal_sensitivities_make_only_mandatory_moves(self):
        alpha = np.zeros(8)
        x = np.array([1, 1, 1, 1, 0, 0, 0, 0])
        y = solve_subproblem(sv_of(alpha), x, MoveConstraints(vv=-2, tv_max=8))
        assert np.sum(y == -1) == 2 and np.sum(y == 1) == 0

    def test_masked_elements_never_removed(self):
        alpha = np.array([10.0, 0.0, -5.0])
        x = np.array([1, 1, 0])
        y = solve_subproblem(sv_of(alpha, masked=[0]), x, MoveConstraints(-1, 1))
        assert y.tolist() == [0, -1, 0]

    def test_infeasible_reported(self):
        with pytest.raises(InfeasibleMoveError):
            solve_subproblem(sv_of([1.0, 2.0]), np.array([1, 0]), MoveConstraints(-2, 2))

    def test_matches_exhaustive_enumeration(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 13))
            x = (rng.random(n) < 0.5).astype(np.int8)
            alpha = np.round(rng.standard_normal(n), 3)
            vv_lo = -int(x.sum())
            vv_hi = int((1 - x).sum())
            vv = int(rng.integers(vv_lo, vv_hi + 1))
            tv = int(rng.integers(abs(vv), n + 1))
            y = solve_subproblem(sv_of(alpha), x, MoveConstraints(vv, tv))
            assert int(y.sum()) == vv and int(np.abs(y).sum()) <= tv
            # enumerate all of {-1,0,1}^n as base-3 digit patterns
            idx = np.arange(3**n, dtype=np.int64)
            cand = (idx[:, None] // 3 ** np.arange(n)) % 3 - 1
            ok = ~np.any((cand == 1) & (x == 1), axis=1)
            ok &= ~np.any((cand == -1) & (x == 0), axis=1)
            ok &= cand.sum(axis=1) == vv
            ok &= np.abs(cand).sum(axis=1) <= tv
            best = (cand[ok] @ alpha).min()
            assert float(alpha @ y) == pytest.approx(best, abs=1e-12)


class TestConicFilter:
    def mesh(self, nx=3, ny=1):
        return Mesh(nx, ny, 1.0, 1.0)

    def test_small_radius_is_identity(self):
        mesh = self.mesh()
        sv = sv_of([1.0, 5.0, -2.0])
        out = conic_filter(mesh, sv, radius=0.5)
        np.testing.assert_allclose(out.alpha, sv.alpha)

    def test_uniform_map_is_fixed_point(self):
        mesh = self.mesh(4, 3)
        sv = sv_of(np.full(12, 3.7))
        out = conic_filter(mesh, sv, radius=2.5)
        np.testing.assert_allclose(out.alpha, 3.7)

    def test_three_element_line_hand_computed(self):
        mesh = self.mesh()
        sv = sv_of([1.0, 2.0, 4.0])
        r = 1.5  # weights: self 1.5, adjacent 0.5
        out = conic_filter(mesh, sv, radius=r)
        expected = [
            (1.5 * 1 + 0.5 * 2) / 2.0,
            (0.5 * 1 + 1.5 * 2 + 0.5 * 4) / 2.5,
            (0.5 * 2 + 1.5 * 4) / 2.0,
        ]
        np.testing.assert_allclose(out.alpha, expected, rtol=1e-12)

    def test_masked_excluded_as_source_and_kept_as_target(self):
        mesh = self.mesh()
        sv = sv_of([1.0, 100.0, 4.0], masked=[1])
        out = conic_filter(mesh, sv, radius=1.5)
        assert out.alpha[1] == 100.0  # untouched
        # neighbors never see the masked value
        expected0 = (1.5 * 1 + 0.5 * 4 * 0) / 1.5
        assert out.alpha[0] == pytest.approx(expected0)

    def test_physical_distances(self):
        mesh = Mesh(2, 1, 2.0, 1.0)  # centroids 2.0 apart
        sv = sv_of([1.0, 3.0])
        out = conic_filter(mesh, sv, radius=1.5)
        np.testing.assert_allclose(out.alpha, sv.alpha)  # neighbor out of range


class TestMomentum:
    def test_first_iteration_passthrough(self):
        a = np.array([1.0, 2.0])
        out, buf = momentum_blend(a, None)
        np.testing.assert_array_equal(out, a)
        np.testing.assert_array_equal(buf, a)

    def test_constant_sequence_fixed_point(self):
        a = np.array([3.0, -1.0])
        out, buf = momentum_blend(a, a.copy())
        np.testing.assert_array_equal(out, a)

    def test_two_step_unroll(self):
        a, b, c = (np.array([v], dtype=float) for v in (4.0, 8.0, 2.0))
        out1, buf = momentum_blend(a, None)
        out2, buf = momentum_blend(b, buf)
        assert out2[0] == (4 + 8) / 2
        out3, buf = momentum_blend(c, buf)
        assert out3[0] == ((4 + 8) / 2 + 2) / 2


class TestOptimize:
    def test_greedy_removals_match_naive_oracle(self):
        problem, x0 = tie_beam(scale=1)
        cfg = OptimizerConfig(
            er=0.01, ar_max=0.0, target_volume_fraction=0.96,
            patience=2, max_iterations=5, method=SensitivityMethod(name="woodbury"),
        )
        xs = []
        optimize(problem, cfg, x0, on_iteration=lambda st: xs.append(st.x.copy()))
        mesh = problem.mesh
        tie = {mesh.element_at(29, r) for r in range(4)}
        for xa, xb in zip(xs[:-1], xs[1:]):
            switched = np.nonzero(xa != xb)[0]
            if switched.size == 0:
                continue
            assert switched.size == 1
            removed = int(switched[0])
            assert removed not in tie
            base = problem.compliance_of(xa)
            gain = problem.compliance_of(xb) - base
            alpha = sensitivity_naive(problem, xa).alpha
            best = -alpha[(xa == 1)].max()  # smallest true increase
            assert gain <= best * (1 + 1e-6) + 1e-12 * abs(base)

    def test_volume_and_budget_respected_each_iteration(self, rng):
        problem, x0 = mild_instance(rng)
        n = problem.n_elements
        cfg = OptimizerConfig(
            er=0.1, ar_max=0.1, target_volume_fraction=0.6,
            patience=2, max_iterations=12, method=SensitivityMethod(name="foci", eps_v=1e-6),
        )
        xs = []
        state = optimize(problem, cfg, x0, on_iteration=lambda st: xs.append(st.x.copy()))
        target = round(0.6 * n)
        vols = [volume(x) for x in xs]
        for va, vb, xa, xb in zip(vols[:-1], vols[1:], xs[:-1], xs[1:]):
            mc = schedule(n, cfg, va, target)
            assert vb - va == mc.vv
            assert np.abs(xb - xa).sum() <= mc.tv_max

    def test_best_so_far_dominates_visited(self, rng):
        problem, x0 = mild_instance(rng, n_voids=3)
        n = problem.n_elements
        cfg = OptimizerConfig(
            er=0.0, ar_max=0.1, target_volume_fraction=volume(x0) / n,
            patience=4, max_iterations=25, method=SensitivityMethod(name="foci"),
        )
        state = optimize(problem, cfg, x0)
        at_target = [c for _, vf, c in state.history if round(vf * n) == volume(state.best_x)]
        assert state.best_compliance <= min(at_target) * (1 + 1e-12)

    def test_patience_on_fixed_point(self, rng):
        problem, x0 = mild_instance(rng)
        n = problem.n_elements
        cfg = OptimizerConfig(
            er=0.0, ar_max=0.0, target_volume_fraction=volume(x0) / n,
            patience=1, max_iterations=50, method=SensitivityMethod(name="foci"),
        )
        state = optimize(problem, cfg, x0)
        assert state.iterations <= 2
        np.testing.assert_array_equal(state.best_x, x0)

    def test_cantilever_fixed_volume_convergence(self):
        # fixed 50% volume, exact sensitivities, no filter: the compliance
        # minimum lands near the published iteration count
        problem, x0 = cantilever()
        cfg = OptimizerConfig(
            er=0.0, ar_max=0.022, target_volume_fraction=0.5,
            patience=10, max_iterations=80, method=SensitivityMethod(name="woodbury"),
        )
        state = optimize(problem, cfg, x0)
        assert volume(state.best_x) == 320
        assert 24 <= state.best_iteration <= 34
        # oscillates after the best topology instead of improving
        assert state.iterations == state.best_iteration + cfg.patience + 1

    def test_exact_methods_drive_identical_paths(self, rng):
        # woodbury (selective inverse updated incrementally across
        # multi-element moves) and naive are both exact, so they must make
        # the same moves
        problem, x0 = mild_instance(rng, n_voids=3)
        n = problem.n_elements
        kw = dict(
            er=0.1, ar_max=0.1, target_volume_fraction=0.7,
            patience=2, max_iterations=10,
        )
        paths = {}
        for name in ("woodbury", "naive"):
            xs = []
            optimize(
                problem,
                OptimizerConfig(method=SensitivityMethod(name=name), **kw),
                x0,
                on_iteration=lambda st: xs.append(st.x.copy()),
            )
            paths[name] = xs
        assert len(paths["woodbury"]) == len(paths["naive"])
        for xa, xb in zip(paths["woodbury"], paths["naive"]):
            np.testing.assert_array_equal(xa, xb)

    def test_history_is_append_only_per_iteration(self, rng):
        problem, x0 = mild_instance(rng)
        cfg = OptimizerConfig(
            er=0.05, ar_max=0.05, target_volume_fraction=0.8,
            patience=2, max_iterations=10, method=SensitivityMethod(name="foci"),
        )
        state = optimize(problem, cfg, x0)
        its = [it for it, _, _ in state.history]
        assert its == list(range(len(its)))
