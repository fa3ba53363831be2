"""Panorama loading, validation, rotation and network-input normalization.

Images are ``uint8`` numpy arrays of shape ``(H, W, 3)`` in RGB order. The
horizontal axis of a panorama covers 360 degrees and is treated as cyclic.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

CANONICAL_HEIGHT = 128
CANONICAL_WIDTH = 512

PathLike = Union[str, Path]


class ImageFormatError(ValueError):
    """Raised when a file cannot be decoded as an 8-bit raster."""


def round_half_away(x):
    """Round half away from zero; works on scalars and arrays."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def validate_panorama(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray):
        raise TypeError(f"expected numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"panorama must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("panorama must be non-empty")
    if img.dtype != np.uint8:
        raise ValueError(f"panorama must be uint8, got {img.dtype}")
    return img


def load_panorama(
    path: PathLike,
    target_height: int = CANONICAL_HEIGHT,
    target_width: int = CANONICAL_WIDTH,
) -> np.ndarray:
    """Read a PNG/JPEG file and return an ``(target_height, target_width, 3)`` uint8 image.

    Grayscale files are replicated over the three channels. Files whose size
    already matches the target are returned without resampling; everything
    else goes through a bilinear resize.
    """
    if target_height <= 0 or target_width <= 0:
        raise ValueError(f"target size must be positive, got {target_height}x{target_width}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as pil:
            pil.load()
            if pil.mode not in ("L", "RGB", "RGBA", "P", "LA"):
                raise ImageFormatError(f"{path}: unsupported mode {pil.mode!r} (need 8-bit)")
            pil = pil.convert("RGB")
            if pil.size != (target_width, target_height):
                pil = pil.resize((target_width, target_height), Image.BILINEAR)
            img = np.asarray(pil, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: cannot decode image") from exc
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return np.ascontiguousarray(img)


def save_panorama(img: np.ndarray, path: PathLike) -> None:
    validate_panorama(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path)


def rotation_shift(degrees: float, width: int) -> int:
    """Number of columns a rotation by ``degrees`` moves the panorama (mod width)."""
    deg = math.fmod(float(degrees), 360.0)
    if deg < 0:
        deg += 360.0
    return int(round_half_away(deg / 360.0 * width)) % width


def rotate_panorama(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a panorama about the vertical axis by circularly shifting its columns."""
    validate_panorama(img)
    shift = rotation_shift(degrees, img.shape[1])
    return np.roll(img, shift, axis=1)


def to_network_input(
    img: np.ndarray,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Scale to ``[0, 1]`` as float32, optionally followed by per-channel standardization."""
    validate_panorama(img)
    out = img.astype(np.float32) / np.float32(255.0)
    if mean is not None or std is not None:
        m = np.asarray(mean if mean is not None else (0.0, 0.0, 0.0), dtype=np.float32)
        s = np.asarray(std if std is not None else (1.0, 1.0, 1.0), dtype=np.float32)
        if np.any(s <= 0):
            raise ValueError("std entries must be positive")
        out = (out - m) / s
    return out


def to_chw_batch(images: Sequence[np.ndarray], mean=None, std=None) -> np.ndarray:
    """Stack images into an ``(N, 3, H, W)`` float32 batch."""
    return np.stack([to_network_input(im, mean, std).transpose(2, 0, 1) for im in images])
