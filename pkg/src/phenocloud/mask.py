"""Foreground masks for the raw turntable photographs.

Pixels are kept when their 8-bit LAB encoding has ``b >= b_min`` and
``a < a_max``. The encoding is L*·255/100, a*+128, b*+128 (sRGB, D65).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgument, IoError

B_MIN = 80
A_MAX = 140

# sRGB (IEC 61966-2-1) linear RGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


@dataclass(frozen=True)
class Image:
    """Row-major 8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidArgument(f"expected (h, w, 3) pixels, got {px.shape}")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (height, width) bool, True = foreground

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def rgb_to_lab8(rgb) -> np.ndarray:
    """Convert 8-bit sRGB values (shape (..., 3)) to 8-bit encoded LAB."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    enc = np.stack([L * 255.0 / 100.0, a + 128.0, b + 128.0], axis=-1)
    return np.clip(np.rint(enc), 0, 255).astype(np.uint8)


def threshold_lab(lab8: np.ndarray, b_min: int = B_MIN, a_max: int = A_MAX) -> np.ndarray:
    lab8 = np.asarray(lab8)
    return (lab8[..., 2].astype(int) >= b_min) & (lab8[..., 1].astype(int) < a_max)


def make_mask(image: Image, b_min: int = B_MIN, a_max: int = A_MAX) -> BinaryMask:
    return BinaryMask(threshold_lab(rgb_to_lab8(image.pixels), b_min, a_max))


def read_image(path) -> Image:
    """Load a PNG or binary PPM (P6) file as RGB."""
    try:
        with PILImage.open(path) as im:
            return Image(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def write_mask_png(mask: BinaryMask, path) -> None:
    data = np.where(mask.bits, 255, 0).astype(np.uint8)
    try:
        PILImage.fromarray(data, mode="L").save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise IoError(str(exc)) from exc


def read_mask_png(path) -> BinaryMask:
    try:
        with PILImage.open(path) as im:
            return BinaryMask(np.asarray(im.convert("L")) >= 128)
    except OSError as exc:
        raise IoError(str(exc)) from exc
