"""Co-sparse analysis operators and their image-global application.

An analysis operator is a tall k x n matrix with unit-norm rows; each row is a
filter acting on a vectorized sqrt(n) x sqrt(n) patch.  Applying the operator
to every patch of an image (one patch centered at every pixel, mirror boundary)
is equivalent to k two-dimensional correlations and is the workhorse of both
learning and reconstruction.  Patches are vectorized column-major: entry
(dr, dc) of a patch lands at index dc * p + dr.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import isqrt
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._filters import mirror_index_map

__all__ = [
    "ROW_NORM_TOL",
    "AnalysisOperator",
    "CoSupport",
    "CoefficientStack",
    "OperatorFormatError",
    "OperatorPair",
    "analyze_patch",
    "apply_global",
    "apply_global_adjoint",
    "cosupport",
    "cosupport_dependency",
    "load_pair",
    "save_pair",
]

ROW_NORM_TOL = 1e-10
_FILE_ROW_NORM_TOL = 1e-8
_MAGIC = b"JIDO"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")


class OperatorFormatError(ValueError):
    """Malformed or inconsistent operator file."""


@dataclass(frozen=True)
class AnalysisOperator:
    """Immutable k x n analysis operator with unit-norm rows.

    n must be a perfect square (the patch is square); k >= n so the operator
    can be co-sparsifying without losing rank.
    """

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"operator must be 2-D, got shape {rows.shape}")
        k, n = rows.shape
        if k < n:
            raise ValueError(f"operator needs k >= n rows, got k={k}, n={n}")
        side = isqrt(n)
        if side * side != n:
            raise ValueError(f"patch dimension {n} is not a perfect square")
        deviation = float(np.max(np.abs(np.linalg.norm(rows, axis=1) - 1.0)))
        if deviation > ROW_NORM_TOL:
            raise ValueError(
                f"rows must have unit norm (max deviation {deviation:.3e})"
            )
        rows = rows.copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    @property
    def patch_side(self) -> int:
        return isqrt(self.rows.shape[1])


@dataclass(frozen=True)
class OperatorPair:
    """A coupled (intensity, depth) operator pair sharing one sparsity scale."""

    intensity: AnalysisOperator
    depth: AnalysisOperator
    nu: float

    def __post_init__(self):
        if self.intensity.k != self.depth.k:
            raise ValueError(
                f"operators must share the row count, got {self.intensity.k} "
                f"and {self.depth.k}"
            )
        if self.intensity.patch_side != self.depth.patch_side:
            raise ValueError("operators must share the patch side")
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be a positive real, got {self.nu}")


@dataclass(frozen=True)
class CoefficientStack:
    """All analysis coefficients of one image.

    `values[r, c, j]` is the response of filter j for the patch centered at
    pixel (r, c); the flattened length is K = h * w * k.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError(f"expected (h, w, k) coefficients, got {values.shape}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class CoSupport:
    """Indices (0-based) of coefficients with magnitude at most `tolerance`."""

    indices: frozenset
    tolerance: float


def analyze_patch(op: AnalysisOperator, patch: np.ndarray) -> np.ndarray:
    """Coefficients of one vectorized patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (op.n,):
        raise ValueError(f"patch must have shape ({op.n},), got {patch.shape}")
    return op.rows @ patch


def cosupport(coefficients: np.ndarray, tolerance: float = 0.0) -> CoSupport:
    """Co-support of a coefficient vector at the given magnitude tolerance."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.ndim != 1:
        raise ValueError("expected a 1-D coefficient vector")
    idx = np.flatnonzero(np.abs(coefficients) <= tolerance)
    return CoSupport(frozenset(int(i) for i in idx), float(tolerance))


def cosupport_dependency(intensity_coefficients: np.ndarray,
                         depth_coefficients: np.ndarray,
                         percentile: float = 10.0) -> tuple[float, float]:
    """Empirical co-support coupling between two coefficient collections.

    Thresholds each modality at the given percentile of coefficient magnitude
    and returns ``(conditional, unconditional)``: the frequency of a depth
    coefficient being small given the matching intensity coefficient is small,
    and the plain frequency of a depth coefficient being small.  A coupled
    pair on registered data shows conditional well above unconditional.
    """
    a = np.abs(np.asarray(intensity_coefficients, dtype=np.float64))
    b = np.abs(np.asarray(depth_coefficients, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("coefficient collections must have matching shapes")
    tau_i = np.percentile(a, percentile)
    tau_d = np.percentile(b, percentile)
    small_i = a <= tau_i
    small_d = b <= tau_d
    if not small_i.any():
        raise ValueError("degenerate intensity threshold: no small coefficients")
    return float(small_d[small_i].mean()), float(small_d.mean())


def _patch_pads(side: int) -> tuple[int, int]:
    before = side // 2
    return before, side - 1 - before


def patch_matrix(image: np.ndarray, side: int) -> np.ndarray:
    """Column-major vectorized patches centered at every pixel, (h, w, side**2).

    The patch at (r, c) spans offsets -floor(side/2) .. ceil(side/2) - 1 in
    both directions; out-of-image samples come from mirror reflection.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if h < side or w < side:
        raise ValueError(
            f"image {image.shape} is smaller than the {side}x{side} patch"
        )
    before, after = _patch_pads(side)
    rows = mirror_index_map(h, before, after)
    cols = mirror_index_map(w, before, after)
    padded = image[np.ix_(rows, cols)]
    win = sliding_window_view(padded, (side, side))
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(h, w, side * side)


def _global_coeff_array(rows: np.ndarray, image: np.ndarray) -> np.ndarray:
    k, n = rows.shape
    side = isqrt(n)
    patches = patch_matrix(image, side)
    h, w = patches.shape[:2]
    return (patches.reshape(h * w, n) @ rows.T).reshape(h, w, k)


def _global_adjoint_array(rows: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    k, n = rows.shape
    side = isqrt(n)
    h, w = coeffs.shape[:2]
    before, after = _patch_pads(side)
    contrib = (coeffs.reshape(h * w, k) @ rows).reshape(h, w, side, side)
    canvas = np.zeros((h + side - 1, w + side - 1), dtype=np.float64)
    for dc in range(side):
        for dr in range(side):
            canvas[dr:dr + h, dc:dc + w] += contrib[:, :, dc, dr]
    row_map = mirror_index_map(h, before, after)
    col_map = mirror_index_map(w, before, after)
    folded = np.zeros((h, canvas.shape[1]), dtype=np.float64)
    np.add.at(folded, row_map, canvas)
    out = np.zeros((w, h), dtype=np.float64)
    np.add.at(out, col_map, folded.T)
    return out.T


def apply_global(op: AnalysisOperator, image: np.ndarray) -> CoefficientStack:
    """Apply the operator to the patch around every pixel of the image."""
    image = np.asarray(image, dtype=np.float64)
    return CoefficientStack(_global_coeff_array(op.rows, image))


def apply_global_adjoint(op: AnalysisOperator, stack: CoefficientStack) -> np.ndarray:
    """Exact adjoint of `apply_global` (mirror boundary included)."""
    if stack.k != op.k:
        raise ValueError(
            f"stack carries {stack.k} coefficients per pixel, operator has {op.k} rows"
        )
    if stack.height < op.patch_side or stack.width < op.patch_side:
        raise ValueError("coefficient stack is smaller than the patch")
    return _global_adjoint_array(op.rows, stack.values)


def save_pair(pair: OperatorPair, path) -> None:
    """Write an operator pair to the little-endian binary container."""
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        pair.intensity.k,
        pair.intensity.n,
        pair.depth.n,
        pair.nu,
    )
    body = (
        pair.intensity.rows.astype("<f8").tobytes()
        + pair.depth.rows.astype("<f8").tobytes()
    )
    Path(path).write_bytes(header + body)


def load_pair(path) -> OperatorPair:
    """Read an operator pair, re-validating every stored invariant."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise OperatorFormatError(f"{path}: truncated header")
    magic, version, k, n_i, n_d, nu = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise OperatorFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise OperatorFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * k * (n_i + n_d)
    if len(data) != expected:
        raise OperatorFormatError(
            f"{path}: expected {expected} bytes for k={k}, n_I={n_i}, n_D={n_d}, "
            f"found {len(data)}"
        )
    offset = _HEADER.size
    omega_i = np.frombuffer(data, "<f8", k * n_i, offset=offset).reshape(k, n_i).copy()
    omega_d = (
        np.frombuffer(data, "<f8", k * n_d, offset=offset + 8 * k * n_i)
        .reshape(k, n_d)
        .copy()
    )
    for name, omega in (("intensity", omega_i), ("depth", omega_d)):
        if omega.size == 0:
            raise OperatorFormatError(f"{path}: empty {name} operator")
        deviation = float(np.max(np.abs(np.linalg.norm(omega, axis=1) - 1.0)))
        if not np.isfinite(deviation) or deviation > _FILE_ROW_NORM_TOL:
            raise OperatorFormatError(
                f"{path}: {name} operator row norms deviate by {deviation:.3e}"
            )
    try:
        return OperatorPair(AnalysisOperator(omega_i), AnalysisOperator(omega_d), nu)
    except ValueError as exc:
        raise OperatorFormatError(f"{path}: {exc}") from None
