"""Geometric nonlinear conjugate gradient on the oblique manifold.

The oblique manifold OB(n, k) is the set of real n x k matrices whose columns
all have unit Euclidean norm, equipped with the metric inherited from R^(n*k).
A product of two such manifolds is handled by packing the factors side by side
into one n x 2k matrix; every operation below acts column by column, which is
exactly the product geometry.

The same Armijo / Hestenes-Stiefel machinery doubles as a plain Euclidean CG
(`cg_minimize_euclidean`), the degenerate flat-space case used by the
reconstruction solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "COLUMN_NORM_TOL",
    "CgConfig",
    "ObliquePoint",
    "OptimizationError",
    "TangentVector",
    "cg_minimize",
    "cg_minimize_euclidean",
    "project_tangent",
    "retract",
    "transport",
]

COLUMN_NORM_TOL = 1e-12
TANGENCY_TOL = 1e-10

# callback(iteration, point, cost, gradient_norm, accepted_step)
IterationCallback = Callable[[int, object, float, float, float], None]


class OptimizationError(RuntimeError):
    """Non-finite cost or gradient encountered inside the CG loop."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class _StepTooLarge(ValueError):
    """A retraction step annihilated a column."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ObliquePoint:
    """A point on OB(n, k): an n x k matrix with unit-norm columns."""

    matrix: np.ndarray

    def __post_init__(self):
        m = _as_matrix(self.matrix, "matrix").copy()
        deviation = float(np.max(np.abs(np.linalg.norm(m, axis=0) - 1.0)))
        if deviation > COLUMN_NORM_TOL:
            raise ValueError(
                f"columns must have unit norm (max deviation {deviation:.3e})"
            )
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def normalized(matrix) -> "ObliquePoint":
        """Build a point by rescaling every column to unit norm."""
        m = _as_matrix(matrix, "matrix")
        norms = np.linalg.norm(m, axis=0)
        if np.any(norms == 0.0):
            raise ValueError("cannot normalize a zero column")
        return ObliquePoint(m / norms)


@dataclass(frozen=True)
class TangentVector:
    """Tangent vector at `base`: every column orthogonal to the base column."""

    matrix: np.ndarray
    base: ObliquePoint

    def __post_init__(self):
        m = _as_matrix(self.matrix, "matrix")
        if m.shape != self.base.matrix.shape:
            raise ValueError(
                f"tangent shape {m.shape} does not match base {self.base.matrix.shape}"
            )
        dots = np.abs(np.sum(m * self.base.matrix, axis=0))
        scale = np.maximum(1.0, np.linalg.norm(m, axis=0))
        if float(np.max(dots / scale)) > TANGENCY_TOL:
            raise ValueError("matrix is not tangent to the base point")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class CgConfig:
    """Settings for the nonlinear CG loop.

    `gradient_tolerance` is relative to the gradient norm at the start point.
    `restart_period` of None restarts every n*k iterations (the variable count).
    """

    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    armijo_initial_step: float = 1.0
    armijo_shrink: float = 0.5
    armijo_slope: float = 1e-4
    beta_rule: str = "hestenes-stiefel"
    max_backtracks: int = 50
    restart_period: Optional[int] = None

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.gradient_tolerance < 0:
            raise ValueError("gradient_tolerance must be non-negative")
        if self.armijo_initial_step <= 0:
            raise ValueError("armijo_initial_step must be positive")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if not 0 < self.armijo_slope < 1:
            raise ValueError("armijo_slope must lie in (0, 1)")
        if self.beta_rule not in ("hestenes-stiefel", "fletcher-reeves"):
            raise ValueError(f"unknown beta_rule '{self.beta_rule}'")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be positive")
        if self.restart_period is not None and self.restart_period < 1:
            raise ValueError("restart_period must be positive")


def _project_columns(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g - x * np.sum(x * g, axis=0)


def _retract_columns(x: np.ndarray, d: np.ndarray, t: float) -> np.ndarray:
    y = x + t * d
    norms = np.linalg.norm(y, axis=0)
    if np.any(norms < 1e-150):
        raise _StepTooLarge("retraction step annihilates a column")
    return y / norms


def project_tangent(x: ObliquePoint, g) -> TangentVector:
    """Orthogonal projection of an ambient gradient onto the tangent space."""
    g = _as_matrix(g, "g")
    if g.shape != x.matrix.shape:
        raise ValueError(f"gradient shape {g.shape} does not match point {x.matrix.shape}")
    return TangentVector(_project_columns(x.matrix, g), x)


def retract(x: ObliquePoint, t: TangentVector, step: float) -> ObliquePoint:
    """Move along a tangent direction and renormalize every column."""
    if t.matrix.shape != x.matrix.shape:
        raise ValueError("tangent vector shape does not match the point")
    if step == 0.0:
        return x
    try:
        return ObliquePoint(_retract_columns(x.matrix, t.matrix, step))
    except _StepTooLarge as exc:
        raise ValueError(str(exc)) from None


def transport(x_new: ObliquePoint, t: TangentVector) -> TangentVector:
    """Transport a tangent vector to `x_new` by projection."""
    return project_tangent(x_new, t.matrix)


def _inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


def _cg_core(cost, grad, x0, cfg: CgConfig, project, retract_step, wrap,
             callback: Optional[IterationCallback]):
    x = np.array(x0, dtype=np.float64)
    f = float(cost(x))
    if not np.isfinite(f):
        raise OptimizationError("cost is not finite at the start point", 0)
    g_raw = np.asarray(grad(x), dtype=np.float64)
    if not np.all(np.isfinite(g_raw)):
        raise OptimizationError("gradient is not finite", 0)
    g = project(x, g_raw)
    gnorm = float(np.linalg.norm(g))
    trace = [f]
    if gnorm == 0.0:
        return x, trace
    tol = cfg.gradient_tolerance * gnorm
    restart_period = cfg.restart_period or x.size
    d = -g
    slope = -gnorm * gnorm
    step_init = cfg.armijo_initial_step
    since_restart = 0

    for it in range(cfg.max_iterations):
        if gnorm <= tol:
            break

        t = step_init
        accepted = False
        for _ in range(cfg.max_backtracks):
            try:
                x_trial = retract_step(x, d, t)
            except _StepTooLarge:
                t *= cfg.armijo_shrink
                continue
            f_trial = float(cost(x_trial))
            # Non-finite trial values are rejected exactly like Armijo failures.
            if np.isfinite(f_trial) and f_trial <= f + cfg.armijo_slope * t * slope:
                accepted = True
                break
            t *= cfg.armijo_shrink
        if not accepted:
            break

        x, f = x_trial, f_trial
        g_raw = np.asarray(grad(x), dtype=np.float64)
        if not np.all(np.isfinite(g_raw)):
            raise OptimizationError("gradient is not finite", it)
        g_new = project(x, g_raw)
        gnorm_new = float(np.linalg.norm(g_new))
        trace.append(f)
        if callback is not None:
            callback(it, wrap(x), f, gnorm_new, t)

        since_restart += 1
        if since_restart >= restart_period:
            d = -g_new
            since_restart = 0
        else:
            d_t = project(x, d)
            if cfg.beta_rule == "fletcher-reeves":
                beta = (gnorm_new / gnorm) ** 2
            else:
                y = g_new - project(x, g)
                denom = _inner(d_t, y)
                beta = _inner(g_new, y) / denom if abs(denom) > 1e-300 else 0.0
            d = -g_new + beta * d_t
        slope = _inner(g_new, d)
        if slope >= 0.0:
            d = -g_new
            slope = -gnorm_new * gnorm_new
            since_restart = 0
        g, gnorm = g_new, gnorm_new
        step_init = min(cfg.armijo_initial_step, 2.0 * t)

    return x, trace


def cg_minimize(cost, euclid_grad, x0: ObliquePoint, cfg: CgConfig,
                callback: Optional[IterationCallback] = None):
    """Minimize over OB(n, k) with geometric nonlinear CG.

    Parameters
    ----------
    cost:
        Callable mapping an `ObliquePoint` to a real value.
    euclid_grad:
        Callable mapping an `ObliquePoint` to the ambient n x k gradient.
    x0:
        Start point.
    cfg:
        Line-search and termination settings.
    callback:
        Optional per-accepted-iteration hook
        ``callback(iteration, point, cost, gradient_norm, step)``.

    Returns
    -------
    (ObliquePoint, list[float])
        The final iterate and the non-increasing cost trace (start value
        included).
    """
    xm, trace = _cg_core(
        lambda m: cost(ObliquePoint(m)),
        lambda m: euclid_grad(ObliquePoint(m)),
        x0.matrix,
        cfg,
        _project_columns,
        _retract_columns,
        ObliquePoint,
        callback,
    )
    return ObliquePoint(xm), trace


def cg_minimize_euclidean(cost, grad, x0: np.ndarray, cfg: CgConfig,
                          callback: Optional[IterationCallback] = None):
    """Flat-space variant of `cg_minimize` operating on plain arrays."""
    x0 = np.asarray(x0, dtype=np.float64)
    return _cg_core(
        cost,
        grad,
        x0,
        cfg,
        lambda x, g: g,
        lambda x, d, t: x + t * d,
        lambda x: x,
        callback,
    )
