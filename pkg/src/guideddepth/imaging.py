"""Grayscale image handling: containers, file I/O, resampling, metrics.

Pixels live in [0, 1] as float64 regardless of the file's bit depth; the
origin depth is kept so round trips are lossless.  Depth maps follow the
raw-zero-means-invalid convention used by consumer depth sensors, so a pixel
that is exactly zero is excluded from training and from every metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _filters

__all__ = [
    "DepthMap",
    "GrayImage",
    "ImageFormatError",
    "bad_pixel_rate",
    "gaussian_downsample",
    "load_depth",
    "load_image",
    "quantize",
    "rmse_8bit",
    "save_image",
    "upsample_baseline",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_BASELINE_METHODS = ("nearest", "bilinear", "bicubic")


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


@dataclass(frozen=True)
class GrayImage:
    """A single-channel image with values in [0, 1].

    `bit_depth` records the precision of the file the image came from (or is
    destined for); it does not restrict the float pixel values.
    """

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"expected a non-empty 2-D image, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(
                f"pixels must lie in [0, 1], got range [{px.min()}, {px.max()}]"
            )
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class DepthMap:
    """A depth (or disparity) image plus its validity mask."""

    image: GrayImage
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != self.image.shape:
            raise ValueError(
                f"mask shape {mask.shape} does not match image {self.image.shape}"
            )
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def pixels(self) -> np.ndarray:
        return self.image.pixels

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    @staticmethod
    def from_pixels(pixels, mask=None, bit_depth: int = 8) -> "DepthMap":
        """Wrap raw values; without an explicit mask, zero means invalid."""
        image = GrayImage(pixels, bit_depth)
        if mask is None:
            mask = image.pixels > 0.0
        return DepthMap(image, mask)


def _pixels_of(image) -> np.ndarray:
    if isinstance(image, DepthMap):
        return image.pixels
    if isinstance(image, GrayImage):
        return image.pixels
    return np.asarray(image, dtype=np.float64)


def quantize(pixels, bit_depth: int) -> np.ndarray:
    """Round [0, 1] values half-up onto the integer grid of the bit depth."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    maxval = (1 << bit_depth) - 1
    px = np.clip(_pixels_of(pixels), 0.0, 1.0)
    levels = np.floor(px * maxval + 0.5)
    return levels.astype(np.uint8 if bit_depth == 8 else np.uint16)


def _parse_pgm(data: bytes, path: Path) -> GrayImage:
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary (P5) PGM file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageFormatError(f"{path}: malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed PGM header")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    raster = data[pos:pos + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated PGM raster")
    raw = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    if raw.max(initial=0) > maxval:
        raise ImageFormatError(f"{path}: sample exceeds the declared maxval")
    return GrayImage(raw.astype(np.float64) / maxval, 16 if maxval > 255 else 8)


def _load_png(path: Path) -> GrayImage:
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode == "L":
        return GrayImage(arr.astype(np.float64) / 255.0, 8)
    if mode in ("I;16", "I;16B", "I"):
        arr = arr.astype(np.float64)
        if arr.max(initial=0) > 65535 or arr.min(initial=0) < 0:
            raise ImageFormatError(f"{path}: gray values outside the 16-bit range")
        return GrayImage(arr / 65535.0, 16)
    if mode == "RGB":
        arr = arr.astype(np.float64) / 255.0
        luma = (
            LUMA_WEIGHTS[0] * arr[..., 0]
            + LUMA_WEIGHTS[1] * arr[..., 1]
            + LUMA_WEIGHTS[2] * arr[..., 2]
        )
        return GrayImage(luma, 8)
    raise ImageFormatError(f"{path}: unsupported image mode '{mode}'")


def load_image(path) -> GrayImage:
    """Load a PGM (binary P5) or PNG (8/16-bit gray, 8-bit RGB) image."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        return _parse_pgm(path.read_bytes(), path)
    if suffix == ".png":
        try:
            return _load_png(path)
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"{path}: {exc}") from None
    raise ImageFormatError(f"{path}: unsupported image format '{suffix}'")


def load_depth(path) -> DepthMap:
    """Load a depth map; raw zero samples are marked invalid."""
    image = load_image(path)
    return DepthMap(image, image.pixels > 0.0)


def save_image(image, path, bit_depth: int | None = None) -> None:
    """Quantize to the requested bit depth and write a PGM or PNG file."""
    if bit_depth is None:
        bit_depth = image.bit_depth if isinstance(image, GrayImage) else 8
    raw = quantize(image, bit_depth)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        maxval = (1 << bit_depth) - 1
        header = f"P5\n{raw.shape[1]} {raw.shape[0]}\n{maxval}\n".encode("ascii")
        body = raw.astype(">u2").tobytes() if bit_depth == 16 else raw.tobytes()
        path.write_bytes(header + body)
    elif suffix == ".png":
        # uint16 infers I;16, uint8 infers L.
        Image.fromarray(raw).save(path)
    else:
        raise ImageFormatError(f"{path}: unsupported image format '{suffix}'")


def gaussian_downsample(image, factor: int) -> DepthMap:
    """Blur with the measurement kernel and keep every `factor`-th sample.

    This is the identical code path used by the measurement model, so the
    result matches `apply_measurement` with a full validity mask bit for bit
    (the only divergence is a final clamp to [0, 1] guarding against rounding
    a hair past the range ends).  Zero output samples are flagged invalid per
    the depth convention.
    """
    px = _pixels_of(image)
    if px.ndim != 2:
        raise ValueError("expected a 2-D image")
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    lr = _filters.blur_mirror(px, _filters.gaussian_kernel(factor))[::factor, ::factor]
    if isinstance(image, DepthMap):
        bit_depth = image.image.bit_depth
    elif isinstance(image, GrayImage):
        bit_depth = image.bit_depth
    else:
        bit_depth = 8
    return DepthMap.from_pixels(np.clip(lr, 0.0, 1.0), bit_depth=bit_depth)


def upsample_baseline(lr, factor: int, method: str = "bicubic",
                      out_shape: tuple[int, int] | None = None) -> GrayImage:
    """Classic single-image upsampling baseline on the decimation grid.

    `nearest` replicates pixels, `bilinear` and `bicubic` (Catmull-Rom)
    interpolate with mirror boundary handling.  LR sample i corresponds to HR
    position factor * i, matching `gaussian_downsample`.
    """
    if method not in _BASELINE_METHODS:
        raise ValueError(
            f"unknown method '{method}', expected one of {_BASELINE_METHODS}"
        )
    px = _pixels_of(lr)
    hr = _filters.upsample(px, factor, method, out_shape)
    bit_depth = 8
    if isinstance(lr, GrayImage):
        bit_depth = lr.bit_depth
    elif isinstance(lr, DepthMap):
        bit_depth = lr.image.bit_depth
    return GrayImage(np.clip(hr, 0.0, 1.0), bit_depth)


def _metric_inputs(estimate, truth: DepthMap):
    est = _pixels_of(estimate)
    if est.shape != truth.shape:
        raise ValueError(
            f"estimate shape {est.shape} does not match ground truth {truth.shape}"
        )
    if not truth.mask.any():
        raise ValueError("ground truth has no valid pixels")
    est8 = quantize(est, 8).astype(np.int64)
    gt8 = quantize(truth.pixels, 8).astype(np.int64)
    return np.abs(est8 - gt8)[truth.mask]


def bad_pixel_rate(estimate, truth: DepthMap, delta: float = 1.0) -> float:
    """Percentage of valid pixels whose 8-bit error exceeds `delta` levels."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    diff = _metric_inputs(estimate, truth)
    return float(100.0 * np.mean(diff > delta))


def rmse_8bit(estimate, truth: DepthMap) -> float:
    """Root-mean-square error on the 8-bit scale over valid pixels."""
    diff = _metric_inputs(estimate, truth)
    return float(np.sqrt(np.mean(diff.astype(np.float64) ** 2)))
