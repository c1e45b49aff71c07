"""Joint learning of a coupled intensity/depth analysis-operator pair.

Given M registered, zero-mean patch pairs (s_I, s_D), the learner minimizes

    G(O_I, O_D) = (1/M) * sum_i g(O_I s_I^i, O_D s_D^i)^2,
    g(a, b)     = sum_j log(1 + nu * (a_j^2 + b_j^2)),

plus, for each operator, a full-rank log-det barrier h and a row-coherence
barrier r weighted by kappa and mu.  The squared coupled measure rewards
coefficient pairs that vanish together, which is what ties the two modalities'
co-supports.  Optimization runs over the transposed operators on the oblique
manifold product OB(n, k) x OB(n, k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .imaging import DepthMap, GrayImage
from .manifold import CgConfig, ObliquePoint, cg_minimize
from .operators import AnalysisOperator, OperatorPair

__all__ = [
    "LearnConfig",
    "PatchOrigin",
    "TrainingSet",
    "coupled_sparsity",
    "extract_training_pairs",
    "learn_operator_pair",
    "learning_gradient",
    "learning_objective",
    "objective_G",
    "penalty_h",
    "penalty_r",
]

ZERO_MEAN_TOL = 1e-10
_COHERENCE_LIMIT = 1.0 - 1e-12
_LOG_DET_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class PatchOrigin:
    """Provenance of one training patch: source pair and top-left corner."""

    image_id: str
    row: int
    col: int


@dataclass(frozen=True)
class TrainingSet:
    """Registered zero-mean patch pairs drawn from intensity/depth images."""

    intensity_patches: np.ndarray
    depth_patches: np.ndarray
    patch_side: int
    manifest: tuple = ()

    def __post_init__(self):
        si = np.asarray(self.intensity_patches, dtype=np.float64)
        sd = np.asarray(self.depth_patches, dtype=np.float64)
        if si.ndim != 2 or si.shape[0] < 1:
            raise ValueError(f"expected (M, n) intensity patches, got {si.shape}")
        if sd.shape != si.shape:
            raise ValueError(
                f"depth patches {sd.shape} do not match intensity {si.shape}"
            )
        if self.patch_side < 1 or self.patch_side ** 2 != si.shape[1]:
            raise ValueError(
                f"patch side {self.patch_side} does not square to n={si.shape[1]}"
            )
        for name, patches in (("intensity", si), ("depth", sd)):
            worst = float(np.max(np.abs(patches.mean(axis=1))))
            if worst > ZERO_MEAN_TOL:
                raise ValueError(
                    f"{name} patches must be zero-mean (worst offset {worst:.3e})"
                )
        si, sd = si.copy(), sd.copy()
        si.setflags(write=False)
        sd.setflags(write=False)
        object.__setattr__(self, "intensity_patches", si)
        object.__setattr__(self, "depth_patches", sd)
        object.__setattr__(self, "manifest", tuple(self.manifest))

    @property
    def sample_count(self) -> int:
        return self.intensity_patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.intensity_patches.shape[1]


@dataclass(frozen=True)
class LearnConfig:
    """Hyperparameters of the learning problem.

    `k` of None means twofold redundancy (k = 2n).  The defaults reproduce
    the full-scale setting: nu=10, kappa=9e4, mu=1e2.
    """

    nu: float = 10.0
    kappa: float = 9.0e4
    mu: float = 1.0e2
    k: Optional[int] = None
    rng_seed: int = 0
    cg: CgConfig = field(default_factory=lambda: CgConfig(max_iterations=3000))

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ValueError("nu must be positive")
        if self.kappa < 0 or self.mu < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be positive")


def _valid_patch_positions(mask: np.ndarray, side: int) -> np.ndarray:
    """Top-left corners whose side x side window contains no invalid pixel."""
    invalid = (~mask).astype(np.int64)
    acc = np.zeros((invalid.shape[0] + 1, invalid.shape[1] + 1), dtype=np.int64)
    acc[1:, 1:] = invalid.cumsum(axis=0).cumsum(axis=1)
    h, w = mask.shape
    rows = h - side + 1
    cols = w - side + 1
    window = (
        acc[side:side + rows, side:side + cols]
        - acc[:rows, side:side + cols]
        - acc[side:side + rows, :cols]
        + acc[:rows, :cols]
    )
    return np.argwhere(window == 0)


def extract_training_pairs(pairs: Sequence, count: int, patch_side: int,
                           seed: int, ids: Optional[Sequence[str]] = None
                           ) -> TrainingSet:
    """Sample registered patch pairs, equally apportioned across image pairs.

    Parameters
    ----------
    pairs:
        Sequence of (GrayImage or array, DepthMap) registered images.
    count:
        Total number of patch pairs to draw.
    patch_side:
        Side length p of the square patches (n = p * p).
    seed:
        RNG seed; identical inputs and seed give identical sets.
    ids:
        Optional per-pair labels recorded in the manifest.

    Patches overlapping any invalid depth pixel are never drawn; each kept
    patch has its mean removed per modality.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if patch_side < 1:
        raise ValueError("patch_side must be positive")
    if len(pairs) == 0:
        raise ValueError("need at least one image pair")
    if ids is None:
        ids = [f"pair{i}" for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise ValueError("ids must match the number of pairs")

    rng = np.random.default_rng(seed)
    n = patch_side * patch_side
    base, extra = divmod(count, len(pairs))
    intensity = np.empty((count, n), dtype=np.float64)
    depth = np.empty((count, n), dtype=np.float64)
    manifest = []
    cursor = 0
    for index, ((intensity_image, depth_map), label) in enumerate(zip(pairs, ids)):
        px_i = (
            intensity_image.pixels
            if isinstance(intensity_image, GrayImage)
            else np.asarray(intensity_image, dtype=np.float64)
        )
        if not isinstance(depth_map, DepthMap):
            raise TypeError(f"pair '{label}': depth must be a DepthMap")
        if px_i.shape != depth_map.shape:
            raise ValueError(
                f"pair '{label}': intensity {px_i.shape} and depth "
                f"{depth_map.shape} are not registered"
            )
        if px_i.shape[0] < patch_side or px_i.shape[1] < patch_side:
            raise ValueError(f"pair '{label}': images smaller than the patch")
        quota = base + (1 if index < extra else 0)
        if quota == 0:
            continue
        positions = _valid_patch_positions(depth_map.mask, patch_side)
        if len(positions) < quota:
            raise ValueError(
                f"pair '{label}': only {len(positions)} valid patch positions "
                f"for {quota} requested"
            )
        chosen = positions[rng.choice(len(positions), size=quota, replace=False)]
        px_d = depth_map.pixels
        for r, c in chosen:
            si = px_i[r:r + patch_side, c:c + patch_side].flatten(order="F")
            sd = px_d[r:r + patch_side, c:c + patch_side].flatten(order="F")
            intensity[cursor] = si - si.mean()
            depth[cursor] = sd - sd.mean()
            manifest.append(PatchOrigin(label, int(r), int(c)))
            cursor += 1
    return TrainingSet(intensity, depth, patch_side, tuple(manifest))


def coupled_sparsity(a: np.ndarray, b: np.ndarray, nu: float) -> float:
    """Smooth joint sparsity measure sum_j log(1 + nu * (a_j^2 + b_j^2))."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("coefficient vectors must have matching shapes")
    if nu <= 0:
        raise ValueError("nu must be positive")
    return float(np.log1p(nu * (a * a + b * b)).sum())


def _coupling_terms(omega_i, omega_d, training_set: TrainingSet, nu: float):
    a = training_set.intensity_patches @ omega_i.T
    b = training_set.depth_patches @ omega_d.T
    den = 1.0 + nu * (a * a + b * b)
    g = np.log(den).sum(axis=1)
    return a, b, den, g


def objective_G(omega_i: np.ndarray, omega_d: np.ndarray,
                training_set: TrainingSet, nu: float) -> float:
    """Mean squared coupled sparsity over the training set."""
    _, _, _, g = _coupling_terms(
        np.asarray(omega_i, dtype=np.float64),
        np.asarray(omega_d, dtype=np.float64),
        training_set,
        nu,
    )
    return float(np.mean(g * g))


def penalty_h(omega: np.ndarray) -> float:
    """Full-rank barrier -(1 / (n log n)) * log det(Omega^T Omega / k).

    Equals 1 for any unit-norm tight frame (for instance two stacked identity
    matrices) and grows as the row span degenerates.  A numerically singular
    frame returns +inf, the sentinel the line search rejects.
    """
    omega = np.asarray(omega, dtype=np.float64)
    k, n = omega.shape
    if n < 2:
        raise ValueError("the log-det barrier needs n >= 2")
    sign, logdet = np.linalg.slogdet(omega.T @ omega / k)
    if sign <= 0 or logdet < _LOG_DET_FLOOR:
        return float("inf")
    return float(-logdet / (n * math.log(n)))


def penalty_r(omega: np.ndarray) -> float:
    """Row-coherence barrier -sum_{i<l} log(1 - (w_i . w_l)^2).

    Zero when the rows are mutually orthogonal; +inf when any two unit rows
    become (anti)parallel.
    """
    omega = np.asarray(omega, dtype=np.float64)
    gram = omega @ omega.T
    iu = np.triu_indices(omega.shape[0], k=1)
    c = gram[iu]
    if np.any(np.abs(c) >= _COHERENCE_LIMIT):
        return float("inf")
    return float(-np.log1p(-c * c).sum())


def _penalty_gradient(omega: np.ndarray, kappa: float, mu: float) -> np.ndarray:
    k, n = omega.shape
    grad = np.zeros_like(omega)
    if kappa != 0.0:
        grad += kappa * (-2.0 / (n * math.log(n))) * np.linalg.solve(
            omega.T @ omega, omega.T
        ).T
    if mu != 0.0:
        gram = omega @ omega.T
        np.fill_diagonal(gram, 0.0)
        z = gram / (1.0 - gram * gram)
        grad += mu * 2.0 * (z @ omega)
    return grad


def learning_objective(omega_i: np.ndarray, omega_d: np.ndarray,
                       training_set: TrainingSet, config: LearnConfig) -> float:
    """Full learning cost: G plus the weighted barriers of both operators."""
    omega_i = np.asarray(omega_i, dtype=np.float64)
    omega_d = np.asarray(omega_d, dtype=np.float64)
    penalties = 0.0
    for omega in (omega_i, omega_d):
        if config.kappa != 0.0:
            penalties += config.kappa * penalty_h(omega)
        if config.mu != 0.0:
            penalties += config.mu * penalty_r(omega)
        if not np.isfinite(penalties):
            return float("inf")
    return objective_G(omega_i, omega_d, training_set, config.nu) + penalties


def learning_gradient(omega_i: np.ndarray, omega_d: np.ndarray,
                      training_set: TrainingSet, config: LearnConfig
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean gradients of the full learning cost for both operators."""
    omega_i = np.asarray(omega_i, dtype=np.float64)
    omega_d = np.asarray(omega_d, dtype=np.float64)
    a, b, den, g = _coupling_terms(omega_i, omega_d, training_set, config.nu)
    m = training_set.sample_count
    scale = 2.0 * config.nu
    weighted_i = (g[:, None] * (scale * a / den))
    weighted_d = (g[:, None] * (scale * b / den))
    grad_i = (2.0 / m) * weighted_i.T @ training_set.intensity_patches
    grad_d = (2.0 / m) * weighted_d.T @ training_set.depth_patches
    grad_i += _penalty_gradient(omega_i, config.kappa, config.mu)
    grad_d += _penalty_gradient(omega_d, config.kappa, config.mu)
    return grad_i, grad_d


def learn_operator_pair(training_set: TrainingSet, config: LearnConfig,
                        callback=None) -> OperatorPair:
    """Learn a coupled operator pair from registered patch pairs.

    Both transposed operators are optimized jointly as one point on the
    product manifold (packed side by side into an n x 2k block).  The run is
    deterministic for a fixed seed.  `callback` is forwarded to the CG loop
    and receives (iteration, point, cost, gradient_norm, step).
    """
    n = training_set.patch_dim
    k = 2 * n if config.k is None else config.k
    if k < n:
        raise ValueError(f"k must be at least n={n}, got {k}")
    rng = np.random.default_rng(config.rng_seed)

    def random_operator() -> np.ndarray:
        rows = rng.standard_normal((k, n))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    omega0 = [random_operator(), random_operator()]
    x0 = ObliquePoint(np.hstack([omega0[0].T, omega0[1].T]))

    def split(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return matrix[:, :k].T, matrix[:, k:].T

    def cost(point: ObliquePoint) -> float:
        oi, od = split(point.matrix)
        return learning_objective(oi, od, training_set, config)

    def euclid_grad(point: ObliquePoint) -> np.ndarray:
        oi, od = split(point.matrix)
        gi, gd = learning_gradient(oi, od, training_set, config)
        return np.hstack([gi.T, gd.T])

    point, _ = cg_minimize(cost, euclid_grad, x0, config.cg, callback=callback)
    omega_i, omega_d = split(point.matrix)
    return OperatorPair(
        AnalysisOperator(omega_i.copy()),
        AnalysisOperator(omega_d.copy()),
        nu=config.nu,
    )
