"""Shared low-level resampling kernels.

Everything that touches image boundaries lives here so that the measurement
model, the global analysis operator, and the plain-image helpers all use one
bit-identical code path.  The boundary rule throughout is mirror reflection
without repeating the edge sample: index -1 maps to 1, index n maps to n - 2.
"""

from __future__ import annotations

import numpy as np

CUBIC_A = -0.5  # Catmull-Rom


def mirror_index_map(length: int, before: int, after: int) -> np.ndarray:
    """Index map realizing mirror padding of a length-`length` axis.

    The returned integer array has `before + length + after` entries; taking
    an array along an axis with it produces the padded axis.  Requires the
    pad widths to stay below `length` (single reflection).
    """
    if length < 1:
        raise ValueError("cannot pad an empty axis")
    if before > length - 1 or after > length - 1:
        raise ValueError(
            f"mirror pad ({before}, {after}) too wide for axis of length {length}"
        )
    left = np.arange(before, 0, -1)
    mid = np.arange(length)
    right = np.arange(length - 2, length - 2 - after, -1)
    return np.concatenate([left, mid, right])


def reflect_indices(idx: np.ndarray, length: int) -> np.ndarray:
    """Fold arbitrary integer indices into [0, length) by mirror reflection."""
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * length - 2
    j = np.mod(idx, period)
    return np.where(j >= length, period - j, j)


def gaussian_kernel(factor: int) -> np.ndarray:
    """Separable anti-aliasing kernel for decimation by `factor`.

    Size 2*factor - 1, standard deviation factor / 3, normalized to unit sum.
    factor == 1 yields the identity kernel [1.0].
    """
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    radius = factor - 1
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    sigma = factor / 3.0
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def _pad_axis(a: np.ndarray, rad: int, axis: int) -> np.ndarray:
    if rad == 0:
        return a
    return np.take(a, mirror_index_map(a.shape[axis], rad, rad), axis=axis)


def _valid_corr_axis(ap: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    out_len = ap.shape[axis] - len(kernel) + 1
    am = np.moveaxis(ap, axis, 0)
    out = np.zeros((out_len,) + am.shape[1:], dtype=np.float64)
    for t, w in enumerate(kernel):
        out += w * am[t:t + out_len]
    return np.moveaxis(out, 0, axis)


def blur_mirror(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation with mirror boundary; output size equals input."""
    image = np.asarray(image, dtype=np.float64)
    rad = len(kernel) // 2
    out = image * kernel[0] if len(kernel) == 1 else image
    if len(kernel) > 1:
        for axis in (0, 1):
            out = _valid_corr_axis(_pad_axis(out, rad, axis), kernel, axis)
    return out


def blur_mirror_adjoint(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Exact adjoint of `blur_mirror` with the same kernel."""
    out = np.asarray(image, dtype=np.float64)
    if len(kernel) == 1:
        return out * kernel[0]
    rad = len(kernel) // 2
    for axis in (1, 0):
        n = out.shape[axis]
        ym = np.moveaxis(out, axis, 0)
        pad_adj = np.zeros((n + len(kernel) - 1,) + ym.shape[1:], dtype=np.float64)
        for t, w in enumerate(kernel):
            pad_adj[t:t + n] += w * ym
        folded = np.zeros((n,) + ym.shape[1:], dtype=np.float64)
        np.add.at(folded, mirror_index_map(n, rad, rad), pad_adj)
        out = np.moveaxis(folded, 0, axis)
    return out


def _cubic_weights(f: np.ndarray) -> list[np.ndarray]:
    # Catmull-Rom (a = -0.5) weights for taps at offsets -1, 0, 1, 2.
    f2 = f * f
    f3 = f2 * f
    return [
        -0.5 * f3 + f2 - 0.5 * f,
        1.5 * f3 - 2.5 * f2 + 1.0,
        -1.5 * f3 + 2.0 * f2 + 0.5 * f,
        0.5 * f3 - 0.5 * f2,
    ]


def _interp_axis(a: np.ndarray, factor: int, method: str, out_len: int,
                 axis: int) -> np.ndarray:
    am = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    length = am.shape[0]
    if method == "nearest":
        out = am[np.arange(out_len) // factor]
    else:
        pos = np.arange(out_len) / factor
        base = np.floor(pos).astype(np.int64)
        f = pos - base
        if method == "bilinear":
            offsets = (0, 1)
            weights = [1.0 - f, f]
        elif method == "bicubic":
            offsets = (-1, 0, 1, 2)
            weights = _cubic_weights(f)
        else:
            raise ValueError(f"unknown interpolation method '{method}'")
        shape = (out_len,) + (1,) * (am.ndim - 1)
        out = np.zeros((out_len,) + am.shape[1:], dtype=np.float64)
        for off, w in zip(offsets, weights):
            idx = reflect_indices(base + off, length)
            out += w.reshape(shape) * am[idx]
    return np.moveaxis(out, 0, axis)


def upsample(lr: np.ndarray, factor: int, method: str,
             out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Upsample by `factor` on the grid where LR sample i sits at HR index factor*i.

    `out_shape` crops/limits the output (default factor times the input shape).
    """
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 2:
        raise ValueError("expected a 2-D array")
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    h, w = lr.shape
    if out_shape is None:
        out_shape = (h * factor, w * factor)
    if out_shape[0] > h * factor or out_shape[1] > w * factor:
        raise ValueError(f"output shape {out_shape} exceeds upsampled extent")
    out = _interp_axis(lr, factor, method, out_shape[0], 0)
    return _interp_axis(out, factor, method, out_shape[1], 1)
