"""Depth-map reconstruction guided by a registered intensity image.

The estimate s_D minimizes

    lambda * sum_j log(1 + nu * (c_j^2 + (O_D^F s_D)_j^2))  +  d(A s_D, y)

where c = O_I^F s_I is the fixed intensity coefficient stack, O_D^F applies
the depth operator around every pixel, A blurs/decimates/masks, and d is a
(possibly diagonally weighted) squared distance.  Large intensity
coefficients c_j mark positions where a depth transition is cheap, which is
how edges survive super-resolution.  lambda is driven through a decreasing
continuation schedule with warm starts; each stage runs the flat-space
variant of the manifold CG.

Both operators are applied to per-patch mean-removed patches, matching the
zero-mean convention the operators were trained under.  (Equivalently, the
rows are projected onto the zero-sum subspace once per solve.)  Without this
the unconstrained DC response of the learned rows puts a spurious price on
absolute brightness that the decimated fidelity term cannot counter, and the
solver drains flat regions toward black.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _filters
from .manifold import CgConfig, cg_minimize_euclidean
from .operators import (
    CoefficientStack,
    OperatorPair,
    _global_adjoint_array,
    _global_coeff_array,
)

__all__ = [
    "FidelityTerm",
    "MeasurementModel",
    "ReconstructionTrace",
    "SolveConfig",
    "TraceRow",
    "apply_measurement",
    "apply_measurement_adjoint",
    "initialize_hr",
    "intensity_code",
    "lr_shape_for",
    "objective_and_gradient",
    "relative_rmse",
    "super_resolve",
]

DEFAULT_LAMBDA_SCHEDULE = (1.0, 10.0 ** -0.5, 0.1, 10.0 ** -1.5, 0.01)


def _zero_sum_rows(rows: np.ndarray) -> np.ndarray:
    """Project operator rows onto the zero-sum subspace.

    Applying the projected rows to raw patches equals applying the original
    rows to mean-removed patches, the convention of the training data.
    """
    return rows - rows.mean(axis=1, keepdims=True)


def lr_shape_for(hr_shape: tuple[int, int], factor: int) -> tuple[int, int]:
    """Low-resolution grid produced by decimating an hr_shape image."""
    return (
        -(-hr_shape[0] // factor),
        -(-hr_shape[1] // factor),
    )


@dataclass(frozen=True)
class MeasurementModel:
    """Blur + decimation + row removal mapping an HR depth map to measurements.

    The blur kernel is separable Gaussian, size (2d - 1) per axis with
    sigma = d / 3, unit sum; decimation keeps samples (d*i, d*j) starting at
    the origin; `validity_mask` removes unreliable LR samples entirely.
    Factor 1 with a full mask is the identity.
    """

    factor: int
    hr_shape: tuple[int, int]
    validity_mask: np.ndarray
    kernel: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        h, w = self.hr_shape
        if h < 1 or w < 1:
            raise ValueError(f"invalid HR shape {self.hr_shape}")
        object.__setattr__(self, "hr_shape", (int(h), int(w)))
        mask = np.asarray(self.validity_mask, dtype=bool).copy()
        if mask.shape != lr_shape_for(self.hr_shape, self.factor):
            raise ValueError(
                f"mask shape {mask.shape} does not match the LR grid "
                f"{lr_shape_for(self.hr_shape, self.factor)}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "validity_mask", mask)
        kernel = _filters.gaussian_kernel(self.factor)
        if abs(float(kernel.sum()) - 1.0) > 1e-12 or not np.allclose(
            kernel, kernel[::-1], rtol=0.0, atol=0.0
        ):
            raise AssertionError("blur kernel must be symmetric with unit sum")
        kernel.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)

    @property
    def lr_shape(self) -> tuple[int, int]:
        return lr_shape_for(self.hr_shape, self.factor)

    @property
    def measurement_count(self) -> int:
        return int(self.validity_mask.sum())

    @staticmethod
    def full(factor: int, hr_shape: tuple[int, int]) -> "MeasurementModel":
        """Model with every LR sample valid."""
        return MeasurementModel(
            factor, hr_shape, np.ones(lr_shape_for(hr_shape, factor), dtype=bool)
        )


def apply_measurement(model: MeasurementModel, hr: np.ndarray) -> np.ndarray:
    """Forward model: blur, decimate, keep valid samples (row-major order)."""
    hr = np.asarray(hr, dtype=np.float64)
    if hr.shape != model.hr_shape:
        raise ValueError(f"image shape {hr.shape} does not match {model.hr_shape}")
    lr = _filters.blur_mirror(hr, model.kernel)[::model.factor, ::model.factor]
    return lr[model.validity_mask]


def apply_measurement_adjoint(model: MeasurementModel, y: np.ndarray) -> np.ndarray:
    """Exact adjoint of `apply_measurement`."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.measurement_count,):
        raise ValueError(
            f"expected {model.measurement_count} measurements, got shape {y.shape}"
        )
    lr = np.zeros(model.lr_shape, dtype=np.float64)
    lr[model.validity_mask] = y
    hr = np.zeros(model.hr_shape, dtype=np.float64)
    hr[::model.factor, ::model.factor] = lr
    return _filters.blur_mirror_adjoint(hr, model.kernel)


@dataclass(frozen=True)
class FidelityTerm:
    """Squared data distance: plain or diagonally weighted (Mahalanobis)."""

    kind: str
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("iid_gaussian", "diagonal_mahalanobis"):
            raise ValueError(f"unknown fidelity kind '{self.kind}'")
        if self.kind == "diagonal_mahalanobis":
            w = np.asarray(self.weights, dtype=np.float64)
            if w.ndim != 1 or w.size == 0:
                raise ValueError("mahalanobis weights must be a non-empty vector")
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("mahalanobis weights must be positive and finite")
            w = w.copy()
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)
        elif self.weights is not None:
            raise ValueError("iid fidelity takes no weights")

    @staticmethod
    def iid() -> "FidelityTerm":
        return FidelityTerm("iid_gaussian")

    @staticmethod
    def mahalanobis(measurements: np.ndarray) -> "FidelityTerm":
        """Weights 1 / y_i^2: sensor noise growing quadratically with range.

        The weights are scale free: rescaling the measurements rescales the
        residuals by the same factor, so normalized values give the same
        objective as raw sensor units.
        """
        y = np.asarray(measurements, dtype=np.float64)
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            raise ValueError(
                "mahalanobis weighting needs strictly positive measurements"
            )
        return FidelityTerm("diagonal_mahalanobis", 1.0 / (y * y))

    def value(self, residual: np.ndarray) -> float:
        sq = residual * residual
        if self.kind == "diagonal_mahalanobis":
            if residual.shape != self.weights.shape:
                raise ValueError("residual does not match the weight vector")
            sq = self.weights * sq
        return float(np.sum(sq))

    def gradient_factor(self, residual: np.ndarray) -> np.ndarray:
        if self.kind == "diagonal_mahalanobis":
            return 2.0 * self.weights * residual
        return 2.0 * residual


@dataclass(frozen=True)
class SolveConfig:
    """Continuation schedule and per-stage iteration budget."""

    lambda_schedule: tuple = DEFAULT_LAMBDA_SCHEDULE
    iterations_per_stage: int = 100
    trace_enabled: bool = True

    def __post_init__(self):
        schedule = tuple(float(v) for v in self.lambda_schedule)
        if len(schedule) < 1:
            raise ValueError("the continuation schedule needs at least one stage")
        if any(not (math.isfinite(v) and v > 0) for v in schedule):
            raise ValueError("every lambda must be a positive real")
        if any(b > a for a, b in zip(schedule, schedule[1:])):
            raise ValueError("the lambda schedule must be non-increasing")
        if self.iterations_per_stage < 1:
            raise ValueError("iterations_per_stage must be positive")
        object.__setattr__(self, "lambda_schedule", schedule)


@dataclass
class TraceRow:
    stage: int
    iteration: int
    objective: float
    fidelity: float
    sparsity: float
    rel_rmse: Optional[float] = None


@dataclass
class ReconstructionTrace:
    """Per-iteration solver diagnostics, one row per accepted step."""

    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def stage_rows(self, stage: int) -> list:
        return [row for row in self.rows if row.stage == stage]

    def to_csv(self, path) -> None:
        with_rmse = any(row.rel_rmse is not None for row in self.rows)
        header = ["stage", "iter", "objective", "fidelity", "sparsity"]
        if with_rmse:
            header.append("rel_rmse")
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in self.rows:
                record = [
                    row.stage,
                    row.iteration,
                    f"{row.objective:.10g}",
                    f"{row.fidelity:.10g}",
                    f"{row.sparsity:.10g}",
                ]
                if with_rmse:
                    record.append(
                        "" if row.rel_rmse is None else f"{row.rel_rmse:.10g}"
                    )
                writer.writerow(record)


def intensity_code(pair: OperatorPair, intensity: np.ndarray) -> CoefficientStack:
    """Coefficient stack of the guide image, computed once per solve.

    Patches are analyzed mean-removed, so a constant guide yields an exactly
    zero code and the objective degrades to the single-modality prior.
    """
    px = np.asarray(intensity, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError("expected a 2-D intensity image")
    if px.size and (px.min() < -1e-9 or px.max() > 1.0 + 1e-9):
        raise ValueError("intensity values must lie in [0, 1]")
    return CoefficientStack(
        _global_coeff_array(_zero_sum_rows(pair.intensity.rows), px)
    )


class _DepthObjective:
    """Cost/gradient of one continuation stage with per-point caching.

    The caller always evaluates the gradient (and the trace components) at an
    array object the cost was just evaluated at, so intermediate stacks are
    cached keyed on object identity.
    """

    def __init__(self, pair: OperatorPair, model: MeasurementModel,
                 fidelity: FidelityTerm, code_squared: np.ndarray,
                 measurements: np.ndarray, lam: float):
        self._rows = _zero_sum_rows(pair.depth.rows)
        self._nu = pair.nu
        self._model = model
        self._fidelity = fidelity
        self._c2 = code_squared
        self._y = measurements
        self._lam = lam
        self._stacks = (None, None, None)
        self._components = (None, None, None)

    def _coeffs(self, x: np.ndarray):
        key, b, den = self._stacks
        if key is not x:
            b = _global_coeff_array(self._rows, x)
            den = 1.0 + self._nu * (self._c2 + b * b)
            self._stacks = (x, b, den)
        return b, den

    def components(self, x: np.ndarray) -> tuple[float, float]:
        """(sparsity, fidelity) at x."""
        key, sparsity, fidelity = self._components
        if key is not x:
            _, den = self._coeffs(x)
            sparsity = float(np.log(den).sum())
            residual = apply_measurement(self._model, x) - self._y
            fidelity = self._fidelity.value(residual)
            self._components = (x, sparsity, fidelity)
        return sparsity, fidelity

    def cost(self, x: np.ndarray) -> float:
        sparsity, fidelity = self.components(x)
        return self._lam * sparsity + fidelity

    def gradient(self, x: np.ndarray) -> np.ndarray:
        b, den = self._coeffs(x)
        u = (2.0 * self._nu) * b / den
        grad = self._lam * _global_adjoint_array(self._rows, u)
        residual = apply_measurement(self._model, x) - self._y
        grad += apply_measurement_adjoint(
            self._model, self._fidelity.gradient_factor(residual)
        )
        return grad


def objective_and_gradient(depth: np.ndarray, code: CoefficientStack,
                           pair: OperatorPair, model: MeasurementModel,
                           fidelity: FidelityTerm, lam: float,
                           measurements: np.ndarray
                           ) -> tuple[float, np.ndarray]:
    """Stage objective and its exact gradient at one HR depth image."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != model.hr_shape:
        raise ValueError(f"depth shape {depth.shape} does not match {model.hr_shape}")
    if code.values.shape[:2] != model.hr_shape or code.k != pair.intensity.k:
        raise ValueError("intensity code does not match the model or pair")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    measurements = np.asarray(measurements, dtype=np.float64)
    if measurements.shape != (model.measurement_count,):
        raise ValueError(
            f"expected {model.measurement_count} measurements, "
            f"got shape {measurements.shape}"
        )
    problem = _DepthObjective(
        pair, model, fidelity, code.values ** 2, measurements, lam
    )
    value = problem.cost(depth)
    grad = problem.gradient(depth)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite reconstruction objective or gradient")
    return value, grad


def _nearest_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill invalid entries with the nearest valid value.

    Distance is Euclidean on the grid; exact ties go to the candidate first
    in row-major scan order.
    """
    filled = np.asarray(values, dtype=np.float64).copy()
    if mask.all():
        return filled
    h, w = mask.shape
    valid = np.argwhere(mask)
    holes = np.argwhere(~mask)
    tree = cKDTree(valid)
    k = min(8, len(valid))
    dist, idx = tree.query(holes, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    scan = valid[:, 0] * w + valid[:, 1]
    diff = valid[idx] - holes[:, None, :]
    d2 = (diff * diff).sum(axis=2)
    best_d2 = d2.min(axis=1)
    # Lexicographic (distance, scan order) choice among the k candidates.
    rank = d2 * (h * w) + scan[idx]
    choice = idx[np.arange(len(holes)), rank.argmin(axis=1)]
    # The k nearest may not exhaust an exact tie; redo those rows exactly.
    saturated = (d2 == best_d2[:, None]).all(axis=1) & (k < len(valid))
    for row in np.flatnonzero(saturated):
        candidates = tree.query_ball_point(
            holes[row], math.sqrt(best_d2[row]) + 1e-9
        )
        keys = [
            ((valid[c][0] - holes[row][0]) ** 2
             + (valid[c][1] - holes[row][1]) ** 2, scan[c], c)
            for c in candidates
        ]
        choice[row] = min(keys)[2]
    filled[~mask] = values[valid[choice][:, 0], valid[choice][:, 1]]
    return filled


def initialize_hr(lr_values: np.ndarray, mask: np.ndarray, factor: int,
                  hr_shape: tuple[int, int]) -> np.ndarray:
    """Deterministic warm start: nearest-fill the holes, then upsample bicubic."""
    lr_values = np.asarray(lr_values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if lr_values.shape != mask.shape:
        raise ValueError("values and mask must share a shape")
    if lr_values.shape != lr_shape_for(hr_shape, factor):
        raise ValueError(
            f"LR grid {lr_values.shape} does not match HR {hr_shape} at factor {factor}"
        )
    if not mask.any():
        raise ValueError("cannot initialize from an all-invalid depth map")
    filled = _nearest_fill(lr_values, mask)
    return _filters.upsample(filled, factor, "bicubic", out_shape=hr_shape)


def relative_rmse(estimate: np.ndarray, truth: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> float:
    """||estimate - truth|| / ||truth|| over the (optionally masked) pixels."""
    est = np.asarray(estimate, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError("estimate and truth must share a shape")
    if mask is not None:
        est = est[mask]
        gt = gt[mask]
    denom = float(np.linalg.norm(gt))
    if denom == 0.0:
        raise ValueError("ground truth norm is zero")
    return float(np.linalg.norm(est - gt) / denom)


def super_resolve(lr_depth: np.ndarray, intensity: np.ndarray,
                  pair: OperatorPair, model: MeasurementModel,
                  fidelity: FidelityTerm, config: SolveConfig,
                  ground_truth: Optional[np.ndarray] = None,
                  ground_truth_mask: Optional[np.ndarray] = None
                  ) -> tuple[np.ndarray, ReconstructionTrace]:
    """Reconstruct an HR depth map from masked LR measurements.

    Runs one flat-space CG per lambda stage, warm starting each stage with
    the previous result; the first stage starts from `initialize_hr`.  Values
    at masked LR positions never enter the computation.  The returned image
    is clamped to [0, 1] once, after the final stage.

    With `ground_truth` supplied, every trace row carries the relative RMSE
    of the current (unclamped) iterate.
    """
    lr = np.asarray(lr_depth, dtype=np.float64)
    guide = np.asarray(intensity, dtype=np.float64)
    if guide.shape != model.hr_shape:
        raise ValueError(
            f"intensity {guide.shape} does not match the HR grid {model.hr_shape}"
        )
    if lr.shape != model.lr_shape:
        raise ValueError(
            f"LR depth {lr.shape} does not match the LR grid {model.lr_shape}"
        )
    if ground_truth is not None:
        ground_truth = np.asarray(ground_truth, dtype=np.float64)
        if ground_truth.shape != model.hr_shape:
            raise ValueError("ground truth does not match the HR grid")

    mask = model.validity_mask
    measurements = lr[mask]
    code = intensity_code(pair, guide)
    code_squared = code.values ** 2
    x = initialize_hr(lr, mask, model.factor, model.hr_shape)
    trace = ReconstructionTrace()

    def rmse_of(arr: np.ndarray) -> Optional[float]:
        if ground_truth is None:
            return None
        return relative_rmse(arr, ground_truth, ground_truth_mask)

    for stage, lam in enumerate(config.lambda_schedule, start=1):
        problem = _DepthObjective(
            pair, model, fidelity, code_squared, measurements, lam
        )
        if config.trace_enabled:
            sparsity, fid_value = problem.components(x)
            trace.append(TraceRow(
                stage, 0, lam * sparsity + fid_value, fid_value, sparsity,
                rmse_of(x),
            ))

        def on_iteration(iteration, point, cost, grad_norm, step,
                         _stage=stage, _problem=problem):
            if not config.trace_enabled:
                return
            sparsity, fid_value = _problem.components(point)
            trace.append(TraceRow(
                _stage, iteration + 1, cost, fid_value, sparsity, rmse_of(point),
            ))

        stage_cfg = CgConfig(max_iterations=config.iterations_per_stage)
        x, _ = cg_minimize_euclidean(
            problem.cost, problem.gradient, x, stage_cfg, callback=on_iteration
        )
    return np.clip(x, 0.0, 1.0), trace
