"""Oblique-manifold geometry and the nonlinear CG loop."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guideddepth.manifold import (
    CgConfig,
    ObliquePoint,
    OptimizationError,
    cg_minimize,
    cg_minimize_euclidean,
    project_tangent,
    retract,
    transport,
)


def random_point(rng, n, k):
    m = rng.standard_normal((n, k))
    return ObliquePoint(m / np.linalg.norm(m, axis=0))


class TestObliquePoint:
    def test_accepts_unit_columns(self):
        point = ObliquePoint(np.eye(4)[:, :2])
        assert point.n == 4 and point.k == 2

    def test_rejects_non_unit_columns(self):
        with pytest.raises(ValueError, match="unit norm"):
            ObliquePoint(2.0 * np.eye(3))

    def test_single_column_sphere_is_allowed(self):
        # OB(3, 1) is just the unit sphere; no k >= n restriction here.
        point = ObliquePoint(np.array([[0.0], [0.0], [1.0]]))
        assert (point.n, point.k) == (3, 1)

    def test_matrix_is_immutable(self):
        point = ObliquePoint(np.eye(3))
        with pytest.raises(ValueError):
            point.matrix[0, 0] = 2.0

    def test_normalized_builder(self):
        point = ObliquePoint.normalized(np.array([[3.0, 0.0], [4.0, 5.0]]))
        np.testing.assert_allclose(np.linalg.norm(point.matrix, axis=0), 1.0)


class TestProjectTangent:
    def test_gradient_equal_to_point_projects_to_zero(self):
        x = ObliquePoint(np.eye(3))
        t = project_tangent(x, x.matrix.copy())
        np.testing.assert_array_equal(t.matrix, np.zeros((3, 3)))

    def test_orthogonal_gradient_is_unchanged(self):
        # On the sphere OB(3, 1): x = e1, g = e2 is already tangent.
        x = ObliquePoint(np.array([[1.0], [0.0], [0.0]]))
        g = np.array([[0.0], [1.0], [0.0]])
        np.testing.assert_array_equal(project_tangent(x, g).matrix, g)

    def test_matches_columnwise_formula(self):
        rng = np.random.default_rng(0)
        x = random_point(rng, 5, 7)
        g = rng.standard_normal((5, 7))
        expected = np.column_stack([
            g[:, i] - (x.matrix[:, i] @ g[:, i]) * x.matrix[:, i]
            for i in range(7)
        ])
        np.testing.assert_allclose(project_tangent(x, g).matrix, expected, atol=1e-14)

    def test_result_is_orthogonal_to_point(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            x = random_point(rng, 4, 9)
            t = project_tangent(x, rng.standard_normal((4, 9)))
            dots = np.sum(t.matrix * x.matrix, axis=0)
            assert np.max(np.abs(dots)) < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        x = random_point(rng, 3, 5)
        once = project_tangent(x, rng.standard_normal((3, 5)))
        twice = project_tangent(x, once.matrix)
        np.testing.assert_allclose(twice.matrix, once.matrix, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        x = ObliquePoint(np.eye(3))
        with pytest.raises(ValueError, match="shape"):
            project_tangent(x, np.zeros((2, 2)))


class TestRetract:
    def test_zero_step_is_identity(self):
        rng = np.random.default_rng(2)
        x = random_point(rng, 4, 6)
        t = project_tangent(x, rng.standard_normal((4, 6)))
        np.testing.assert_array_equal(retract(x, t, 0.0).matrix, x.matrix)

    def test_sphere_diagonal_step(self):
        # e1 + 1.0 * e2 normalizes to (1/sqrt(2), 1/sqrt(2), 0).
        x = ObliquePoint(np.array([[1.0], [0.0], [0.0]]))
        t = project_tangent(x, np.array([[0.0], [1.0], [0.0]]))
        stepped = retract(x, t, 1.0)
        expected = np.array([[1.0], [1.0], [0.0]]) / np.sqrt(2.0)
        np.testing.assert_allclose(stepped.matrix, expected, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(-4.0, 4.0))
    def test_columns_stay_unit(self, seed, step):
        rng = np.random.default_rng(seed)
        x = random_point(rng, 3, 4)
        t = project_tangent(x, rng.standard_normal((3, 4)))
        stepped = retract(x, t, step)
        np.testing.assert_allclose(
            np.linalg.norm(stepped.matrix, axis=0), 1.0, atol=1e-12
        )

    def test_annihilating_step_is_an_error(self):
        # A true tangent can never zero a unit column, so drive the guard
        # with a direction that is tangent at a different base point.
        x = ObliquePoint(np.array([[1.0], [0.0]]))
        other = ObliquePoint(np.array([[0.0], [1.0]]))
        t = project_tangent(other, np.array([[-1.0], [0.0]]))
        with pytest.raises(ValueError, match="annihilates"):
            retract(x, t, 1.0)


class TestTransport:
    def test_already_tangent_is_unchanged(self):
        rng = np.random.default_rng(3)
        x = random_point(rng, 5, 3)
        t = project_tangent(x, rng.standard_normal((5, 3)))
        moved = transport(x, t)
        np.testing.assert_allclose(moved.matrix, t.matrix, atol=1e-12)

    def test_parallel_vector_transports_to_zero(self):
        x = ObliquePoint(np.array([[1.0], [0.0]]))
        y = ObliquePoint(np.array([[0.0], [1.0]]))
        t = project_tangent(x, np.array([[0.0], [2.0]]))
        # t is parallel to y's column, so nothing tangent remains at y.
        np.testing.assert_allclose(transport(y, t).matrix, 0.0, atol=1e-15)

    def test_result_is_tangent_at_target(self):
        rng = np.random.default_rng(4)
        x = random_point(rng, 4, 5)
        y = random_point(rng, 4, 5)
        t = project_tangent(x, rng.standard_normal((4, 5)))
        moved = transport(y, t)
        dots = np.sum(moved.matrix * y.matrix, axis=0)
        assert np.max(np.abs(dots)) < 1e-10


def sphere_grid_minimum(cost, resolution=400):
    """Brute-force minimum of a cost over the unit sphere in R^3."""
    theta = np.linspace(0.0, np.pi, resolution)
    phi = np.linspace(0.0, 2.0 * np.pi, 2 * resolution, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    xs = np.stack(
        [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
    )
    values = np.apply_along_axis(cost, -1, xs)
    best = np.unravel_index(np.argmin(values), values.shape)
    return xs[best], values[best]


class TestCgMinimize:
    def test_stationary_start_converges_immediately(self):
        rng = np.random.default_rng(5)
        x0 = random_point(rng, 3, 4)
        target = x0.matrix.copy()
        cost = lambda p: float(np.sum((p.matrix - target) ** 2))
        grad = lambda p: 2.0 * (p.matrix - target)
        point, trace = cg_minimize(cost, grad, x0, CgConfig(max_iterations=50))
        assert len(trace) == 1 and trace[0] == 0.0
        np.testing.assert_array_equal(point.matrix, x0.matrix)

    def test_linear_cost_on_sphere_matches_grid_search(self):
        v = np.array([0.0, 0.0, 2.0])
        cost_vec = lambda x: -float(v @ x)
        expected_x, expected_val = sphere_grid_minimum(cost_vec)
        np.testing.assert_allclose(expected_x, [0.0, 0.0, 1.0], atol=2e-2)

        x0 = ObliquePoint(np.array([[1.0], [0.0], [0.0]]))
        cost = lambda p: cost_vec(p.matrix[:, 0])
        grad = lambda p: -v[:, None]
        point, trace = cg_minimize(
            cost, grad, x0, CgConfig(max_iterations=200, gradient_tolerance=1e-10)
        )
        np.testing.assert_allclose(point.matrix[:, 0], [0.0, 0.0, 1.0], atol=1e-6)
        assert trace[-1] <= expected_val + 1e-6

    def test_trace_is_non_increasing_and_columns_stay_unit(self):
        rng = np.random.default_rng(6)
        n, k = 4, 7
        target = rng.standard_normal((n, k))

        def cost(p):
            return float(np.sum((p.matrix - target) ** 4))

        def grad(p):
            return 4.0 * (p.matrix - target) ** 3

        x0 = random_point(rng, n, k)
        point, trace = cg_minimize(
            cost, grad, x0, CgConfig(max_iterations=300, gradient_tolerance=0.0)
        )
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
        np.testing.assert_allclose(
            np.linalg.norm(point.matrix, axis=0), 1.0, atol=1e-12
        )
        assert trace[-1] < trace[0]

    def test_fletcher_reeves_also_descends(self):
        rng = np.random.default_rng(7)
        target = rng.standard_normal((3, 5))
        cost = lambda p: float(np.sum((p.matrix - target) ** 2))
        grad = lambda p: 2.0 * (p.matrix - target)
        x0 = random_point(rng, 3, 5)
        _, trace = cg_minimize(
            cost, grad, x0,
            CgConfig(max_iterations=200, beta_rule="fletcher-reeves"),
        )
        assert trace[-1] < trace[0]
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))

    def test_non_finite_cost_at_start_raises_with_iteration(self):
        x0 = ObliquePoint(np.eye(3))
        cost = lambda p: float("nan")
        grad = lambda p: np.zeros((3, 3))
        with pytest.raises(OptimizationError, match="iteration 0"):
            cg_minimize(cost, grad, x0, CgConfig())

    def test_non_finite_gradient_raises(self):
        x0 = ObliquePoint(np.eye(3))
        cost = lambda p: float(np.sum(p.matrix ** 2))
        grad = lambda p: np.full((3, 3), np.nan)
        with pytest.raises(OptimizationError):
            cg_minimize(cost, grad, x0, CgConfig())

    def test_callback_reports_accepted_iterations(self):
        rng = np.random.default_rng(8)
        target = rng.standard_normal((3, 4))
        cost = lambda p: float(np.sum((p.matrix - target) ** 2))
        grad = lambda p: 2.0 * (p.matrix - target)
        seen = []
        cg_minimize(
            cost, grad, random_point(rng, 3, 4), CgConfig(max_iterations=25),
            callback=lambda it, point, f, gnorm, step: seen.append(
                (it, f, gnorm, step)
            ),
        )
        assert seen and [entry[0] for entry in seen] == list(range(len(seen)))
        assert all(step > 0 for _, _, _, step in seen)


class TestCgEuclidean:
    def test_quadratic_bowl(self):
        rng = np.random.default_rng(9)
        target = rng.standard_normal((6, 5))
        cost = lambda x: float(np.sum((x - target) ** 2))
        grad = lambda x: 2.0 * (x - target)
        x, trace = cg_minimize_euclidean(
            cost, grad, np.zeros((6, 5)), CgConfig(max_iterations=400)
        )
        np.testing.assert_allclose(x, target, atol=1e-5)
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))

    def test_rosenbrock_descends(self):
        def cost(z):
            x, y = z
            return float((1 - x) ** 2 + 100.0 * (y - x * x) ** 2)

        def grad(z):
            x, y = z
            return np.array([
                -2.0 * (1 - x) - 400.0 * x * (y - x * x),
                200.0 * (y - x * x),
            ])

        x, trace = cg_minimize_euclidean(
            cost, grad, np.array([-1.2, 1.0]), CgConfig(max_iterations=2000)
        )
        # Armijo backtracking (no Wolfe curvature step) crawls through the
        # valley, so only moderate accuracy is expected here.
        assert trace[-1] < 1e-4
        np.testing.assert_allclose(x, [1.0, 1.0], atol=5e-2)


class TestCgConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            CgConfig(armijo_shrink=1.5)
        with pytest.raises(ValueError):
            CgConfig(armijo_initial_step=0.0)
        with pytest.raises(ValueError):
            CgConfig(beta_rule="newton")
        with pytest.raises(ValueError):
            CgConfig(max_backtracks=0)
