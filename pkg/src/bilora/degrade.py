"""Test-time image degradations: 2x downscale, JPEG round trip, Gaussian blur.

Images are float arrays ``[h, w, c]`` in ``[0, 1]``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError

# ITU T.81 Annex K tables, natural (row-major) order.
STD_LUMINANCE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
])
STD_CHROMINANCE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
])

# CLI names -> (kind, default parameter)
DEGRADE_NAMES = {
    "none": ("none", None),
    "lr112": ("low_res", 2),
    "jpeg65": ("jpeg", 65),
    "blur3": ("blur", 3.0),
}


@dataclass(frozen=True)
class DegradeSpec:
    kind: str = "none"
    scale_factor: int | None = None
    quality: int | None = None
    sigma: float | None = None

    def __post_init__(self):
        expected = {"none": set(), "low_res": {"scale_factor"}, "jpeg": {"quality"}, "blur": {"sigma"}}
        if self.kind not in expected:
            raise ConfigError(f"unknown degradation kind {self.kind!r}")
        given = {k for k in ("scale_factor", "quality", "sigma") if getattr(self, k) is not None}
        if given != expected[self.kind]:
            raise ConfigError(f"{self.kind} degradation takes exactly {sorted(expected[self.kind])}, got {sorted(given)}")
        if self.kind == "low_res" and self.scale_factor != 2:
            raise ConfigError("only a 2x downscale is supported")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ConfigError(f"JPEG quality {self.quality} outside [1, 100]")
        if self.kind == "blur" and not self.sigma > 0:
            raise ConfigError(f"blur sigma must be positive, got {self.sigma}")

    @classmethod
    def from_name(cls, name: str, param: float | None = None) -> "DegradeSpec":
        if name not in DEGRADE_NAMES:
            raise ConfigError(f"unknown degradation {name!r}; choose from {sorted(DEGRADE_NAMES)}")
        kind, default = DEGRADE_NAMES[name]
        value = default if param is None else param
        if kind == "none":
            return cls()
        if kind == "low_res":
            return cls(kind, scale_factor=int(value))
        if kind == "jpeg":
            return cls(kind, quality=int(value))
        return cls(kind, sigma=float(value))

    def apply(self, img: np.ndarray) -> np.ndarray:
        return apply_degradation(img, self)


def downscale2x(img: np.ndarray) -> np.ndarray:
    """Mean of each 2x2 block, per channel."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise ContractError(f"downscale2x needs even extents, got {h}x{w}")
    return img.reshape(h // 2, 2, w // 2, 2, *img.shape[2:]).mean(axis=(1, 3))


def embed_center(img: np.ndarray, size: int) -> np.ndarray:
    """Place ``img`` in the middle of a ``size`` x ``size`` canvas filled with its mean."""
    h, w = img.shape[:2]
    canvas = np.empty((size, size) + img.shape[2:])
    canvas[...] = img.mean(axis=(0, 1))
    top, left = (size - h) // 2, (size - w) // 2
    canvas[top:top + h, left:left + w] = img
    return canvas


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ContractError(f"blur sigma must be positive, got {sigma}")
    r = math.ceil(3 * sigma)
    k = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-k * k / (2 * sigma * sigma))
    return w / w.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, wk in enumerate(kernel):
        out += wk * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders."""
    kernel = gaussian_kernel(sigma)
    img = np.asarray(img, dtype=np.float64)
    return _convolve_axis(_convolve_axis(img, kernel, 0), kernel, 1)


def quality_scale(q: int) -> int:
    if not 1 <= q <= 100:
        raise ContractError(f"JPEG quality {q} outside [1, 100]")
    return 5000 // q if q < 50 else 200 - 2 * q


def quant_table(base: np.ndarray, q: int) -> np.ndarray:
    scale = quality_scale(q)
    return np.clip((base * scale + 50) // 100, 1, 255).astype(np.int64)


def jpeg_roundtrip(img: np.ndarray, q: int) -> np.ndarray:
    """Baseline JPEG encode at quality ``q`` (4:2:0) and decode again."""
    lum, chrom = quant_table(STD_LUMINANCE, q), quant_table(STD_CHROMINANCE, q)
    arr = np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(
        buf, format="JPEG", qtables=[lum.ravel().tolist(), chrom.ravel().tolist()],
        subsampling="4:2:0", optimize=False, progressive=False)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def apply_degradation(img: np.ndarray, spec: DegradeSpec) -> np.ndarray:
    """Apply ``spec``; low-res output is re-centred on a canvas of the input size."""
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "none":
        out = img
    elif spec.kind == "low_res":
        out = embed_center(downscale2x(img), img.shape[0])
    elif spec.kind == "jpeg":
        out = jpeg_roundtrip(img, spec.quality)
    else:
        out = gaussian_blur(img, spec.sigma)
    return np.clip(out, 0.0, 1.0)
