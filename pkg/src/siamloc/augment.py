"""Photometric and geometric augmentation of panoramas.

Every transform is a pure function of ``(image, parameters)`` returning a new
uint8 image of the same shape. Randomness only enters through
:func:`enumerate_combos`, which draws effect parameters from a seeded
generator so that an augmented corpus can be regenerated exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence

import cv2
import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from .imaging import (
    load_panorama,
    rotate_panorama,
    round_half_away,
    save_panorama,
    validate_panorama,
)

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "trapezoid")
POLARITIES = ("brighten", "darken")
PEAKS = (100, 160)
FLOOR = 5
MIN_SIZE, MAX_SIZE = 15, 40
GLOBAL_MIN, GLOBAL_MAX = 35, 75
ROTATION_MIN, ROTATION_MAX = 10.0, 350.0

# factor ranges for the effects whose magnitude is left open
CONTRAST_UP = (1.2, 1.6)
CONTRAST_DOWN = (0.5, 0.8)
SATURATION_UP = (1.3, 1.8)
SATURATION_DOWN = (0.3, 0.7)

SHARPEN_MASK = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.int64)
BLUR_MASK = np.ones((5, 5), dtype=np.int64)  # scaled by 1/25 after summation

KINDS = (
    "local",
    "global_bright",
    "global_dark",
    "sharpen",
    "blur",
    "contrast",
    "equalize",
    "saturation",
    "rotation",
    "combo",
)


@dataclass(frozen=True)
class LocalEffectSpec:
    shape: str
    polarity: str
    center: tuple  # (row, col)
    size: int
    peak: int = 160
    floor: int = FLOOR

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if not MIN_SIZE <= self.size <= MAX_SIZE:
            raise ValueError(f"size must be in [{MIN_SIZE}, {MAX_SIZE}], got {self.size}")
        if self.peak not in PEAKS:
            raise ValueError(f"peak must be one of {PEAKS}, got {self.peak}")
        if self.floor != FLOOR:
            raise ValueError(f"floor is fixed at {FLOOR}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shape": self.shape,
            "polarity": self.polarity,
            "center": [int(self.center[0]), int(self.center[1])],
            "size": int(self.size),
            "peak": int(self.peak),
            "floor": int(self.floor),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LocalEffectSpec":
        return cls(d["shape"], d["polarity"], tuple(d["center"]), d["size"], d["peak"], d["floor"])


@dataclass(frozen=True)
class EffectDescriptor:
    """One augmentation: a kind plus its parameters.

    ``combo`` descriptors hold an ordered list of child descriptors under
    ``params["effects"]``; they are applied left to right.
    """

    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown effect kind {self.kind!r}")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "combo":
            return {"kind": "combo", "effects": [e.to_dict() for e in self.params["effects"]]}
        if self.kind == "local":
            return {"kind": "local", "spec": self.params["spec"].to_dict()}
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EffectDescriptor":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "combo":
            return cls("combo", {"effects": [cls.from_dict(e) for e in d["effects"]]})
        if kind == "local":
            return cls("local", {"spec": LocalEffectSpec.from_dict(d["spec"])})
        return cls(kind, d)

    def label(self) -> str:
        if self.kind == "combo":
            return "+".join(e.label() for e in self.params["effects"])
        if self.kind == "local":
            s = self.params["spec"]
            return f"{s.polarity}_{s.shape}"
        return self.kind


# ---------------------------------------------------------------------------
# local light effects
# ---------------------------------------------------------------------------


def _gauge(shape: str, size: int, drow: np.ndarray, dcol: np.ndarray) -> np.ndarray:
    """Distance from the shape center scaled so the boundary sits at 1.

    For a convex shape around its center this is the ratio between a point's
    distance to the center and the center-to-boundary distance along the same
    ray, so a value <= 1 means the point is inside.
    """
    half = size / 2.0
    if shape == "circle":
        return np.hypot(drow, dcol) / half
    if shape == "square":
        return np.maximum(np.abs(drow), np.abs(dcol)) / half
    # isosceles trapezoid, height = size, bottom width = size, top width = size/2;
    # half-width at row offset r is 3*size/8 + r/4
    sides = (np.abs(dcol) - drow / 4.0) / (3.0 * size / 8.0)
    return np.maximum(sides, np.maximum(drow, -drow) / half)


def local_effect_delta(spec: LocalEffectSpec, height: int, width: int) -> np.ndarray:
    """Signed integer intensity delta map of a local effect (zero outside the shape)."""
    row0, col0 = spec.center
    rows = np.arange(height, dtype=np.float64)[:, None] - row0
    cols = np.arange(width, dtype=np.float64)[None, :] - col0
    # the horizontal axis wraps around
    cols = (cols + width / 2.0) % width - width / 2.0
    g = _gauge(spec.shape, spec.size, rows, cols)
    inside = g <= 1.0
    magnitude = spec.floor + (spec.peak - spec.floor) * (1.0 - np.clip(g, 0.0, 1.0))
    magnitude = round_half_away(magnitude).astype(np.int64)
    sign = 1 if spec.polarity == "brighten" else -1
    return np.where(inside, sign * magnitude, 0)


def apply_local_effect(img: np.ndarray, spec: LocalEffectSpec) -> np.ndarray:
    validate_panorama(img)
    h, w = img.shape[:2]
    row0, col0 = spec.center
    if not (0 <= row0 < h and 0 <= col0 < w):
        raise ValueError(f"effect center {spec.center} outside a {h}x{w} image")
    delta = local_effect_delta(spec, h, w)
    return np.clip(img.astype(np.int64) + delta[:, :, None], 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# global effects
# ---------------------------------------------------------------------------


def apply_global_brightness(img: np.ndarray, c: float, sign: str = "+") -> np.ndarray:
    validate_panorama(img)
    if not GLOBAL_MIN <= c <= GLOBAL_MAX:
        raise ValueError(f"brightness offset must be in [{GLOBAL_MIN}, {GLOBAL_MAX}], got {c}")
    if sign not in ("+", "-"):
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    offset = c if sign == "+" else -c
    out = round_half_away(img.astype(np.float64) + offset)
    return np.clip(out, 0, 255).astype(np.uint8)


def _pad_panorama(img: np.ndarray, r: int) -> np.ndarray:
    # replicate rows, wrap columns
    out = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="edge")
    return np.pad(out, ((0, 0), (r, r), (0, 0)), mode="wrap")


def _integer_filter(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Exact integer correlation with panorama boundary handling."""
    k = mask.shape[0]
    r = k // 2
    h, w = img.shape[:2]
    padded = _pad_panorama(img.astype(np.int64), r)
    acc = np.zeros(img.shape, dtype=np.int64)
    for i in range(k):
        for j in range(k):
            if mask[i, j]:
                acc += mask[i, j] * padded[i : i + h, j : j + w]
    return acc


def sharpen(img: np.ndarray) -> np.ndarray:
    validate_panorama(img)
    return np.clip(_integer_filter(img, SHARPEN_MASK), 0, 255).astype(np.uint8)


def blur(img: np.ndarray) -> np.ndarray:
    validate_panorama(img)
    total = _integer_filter(img, BLUR_MASK)
    # round(total / 25) with halves away from zero; total is non-negative
    out = (2 * total + 25) // 50
    return np.clip(out, 0, 255).astype(np.uint8)


def adjust_contrast(img: np.ndarray, c: float) -> np.ndarray:
    validate_panorama(img)
    if not c > 0:
        raise ValueError(f"contrast factor must be positive, got {c}")
    out = round_half_away(64.0 + c * (img.astype(np.float64) - 64.0))
    return np.clip(out, 0, 255).astype(np.uint8)


def equalize(img: np.ndarray) -> np.ndarray:
    validate_panorama(img)
    return np.stack([cv2.equalizeHist(np.ascontiguousarray(img[:, :, k])) for k in range(3)], axis=2)


def adjust_saturation(img: np.ndarray, c: float) -> np.ndarray:
    validate_panorama(img)
    if c < 0:
        raise ValueError(f"saturation factor must be non-negative, got {c}")
    hsv = rgb2hsv(img)
    hsv[:, :, 1] = np.clip(hsv[:, :, 1] * c, 0.0, 1.0)
    rgb = hsv2rgb(hsv) * 255.0
    return np.clip(round_half_away(rgb), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# descriptor dispatch
# ---------------------------------------------------------------------------


def apply_effect(img: np.ndarray, effect: EffectDescriptor) -> np.ndarray:
    p = effect.params
    kind = effect.kind
    if kind == "combo":
        out = img
        for child in p["effects"]:
            out = apply_effect(out, child)
        return out
    if kind == "local":
        spec = p["spec"]
        return apply_local_effect(img, spec)
    if kind == "global_bright":
        return apply_global_brightness(img, p["c"], "+")
    if kind == "global_dark":
        return apply_global_brightness(img, p["c"], "-")
    if kind == "sharpen":
        return sharpen(img)
    if kind == "blur":
        return blur(img)
    if kind == "contrast":
        return adjust_contrast(img, p["c"])
    if kind == "equalize":
        return equalize(img)
    if kind == "saturation":
        return adjust_saturation(img, p["c"])
    if kind == "rotation":
        return rotate_panorama(img, p["degrees"])
    raise ValueError(f"unknown effect kind {kind!r}")


def _draw_local(rng: np.random.Generator, shape: str, polarity: str, height: int, width: int):
    spec = LocalEffectSpec(
        shape=shape,
        polarity=polarity,
        center=(int(rng.integers(0, height)), int(rng.integers(0, width))),
        size=int(rng.integers(MIN_SIZE, MAX_SIZE + 1)),
        peak=int(rng.choice(PEAKS)),
    )
    return EffectDescriptor("local", {"spec": spec})


def _draw_global(rng: np.random.Generator, kind: str) -> EffectDescriptor:
    return EffectDescriptor(kind, {"c": int(rng.integers(GLOBAL_MIN, GLOBAL_MAX + 1))})


def _draw_factor(rng: np.random.Generator, kind: str, bounds) -> EffectDescriptor:
    return EffectDescriptor(kind, {"c": round(float(rng.uniform(*bounds)), 4)})


def _draw_rotation(rng: np.random.Generator) -> EffectDescriptor:
    return EffectDescriptor("rotation", {"degrees": round(float(rng.uniform(ROTATION_MIN, ROTATION_MAX)), 3)})


# closed-form size of enumerate_combos():
#   singles   6 local (3 shapes x 2 polarities) + 2 global + sharpen + blur
#             + 2 contrast + equalize + 2 saturation                      = 15
#   global x single local                     2 x 6                       = 12
#   circle + {circle, square, trapezoid} x {bb, bd, dd}                   =  9
#   three circles                                                         =  1
#   rotation alone                                                        =  1
#   rotation composed with each of the 37 effects above                   = 37
COMBO_COUNT = 15 + 12 + 9 + 1 + 1 + 37


def enumerate_combos(base_rng_seed: int, height: int = 128, width: int = 512) -> List[EffectDescriptor]:
    """Full list of augmentations applied to each source frame (``COMBO_COUNT`` items)."""
    rng = np.random.default_rng(base_rng_seed)
    out: List[EffectDescriptor] = []

    for shape in SHAPES:
        for pol in POLARITIES:
            out.append(_draw_local(rng, shape, pol, height, width))
    out.append(_draw_global(rng, "global_bright"))
    out.append(_draw_global(rng, "global_dark"))
    out.append(EffectDescriptor("sharpen"))
    out.append(EffectDescriptor("blur"))
    out.append(_draw_factor(rng, "contrast", CONTRAST_UP))
    out.append(_draw_factor(rng, "contrast", CONTRAST_DOWN))
    out.append(EffectDescriptor("equalize"))
    out.append(_draw_factor(rng, "saturation", SATURATION_UP))
    out.append(_draw_factor(rng, "saturation", SATURATION_DOWN))

    for gkind in ("global_bright", "global_dark"):
        for shape in SHAPES:
            for pol in POLARITIES:
                parts = [_draw_global(rng, gkind), _draw_local(rng, shape, pol, height, width)]
                out.append(EffectDescriptor("combo", {"effects": parts}))

    for other in SHAPES:
        for pol_a, pol_b in (("brighten", "brighten"), ("brighten", "darken"), ("darken", "darken")):
            parts = [
                _draw_local(rng, "circle", pol_a, height, width),
                _draw_local(rng, other, pol_b, height, width),
            ]
            out.append(EffectDescriptor("combo", {"effects": parts}))

    out.append(
        EffectDescriptor(
            "combo", {"effects": [_draw_local(rng, "circle", "brighten", height, width) for _ in range(3)]}
        )
    )

    base = list(out)
    out.append(_draw_rotation(rng))
    for eff in base:
        children = eff.params["effects"] if eff.kind == "combo" else [eff]
        out.append(EffectDescriptor("combo", {"effects": [*children, _draw_rotation(rng)]}))

    assert len(out) == COMBO_COUNT
    return out


def augment_corpus(frames: Sequence, seed: int, out_dir, image_size=(128, 512), combos=None):
    """Write the original plus every enumerated augmentation of each frame.

    ``frames`` are :class:`siamloc.dataset.Frame` objects whose ``image_path``
    is absolute (as produced by :func:`siamloc.dataset.load_manifest`).
    Returns a :class:`siamloc.dataset.Manifest` rooted at ``out_dir`` and
    writes it to ``out_dir/manifest.txt``; ``effects.jsonl`` records which
    effect produced each image.
    """
    from .dataset import Frame, Manifest, save_manifest

    if not frames:
        raise ValueError("augment_corpus needs at least one frame")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = image_size
    effects = list(combos) if combos is not None else enumerate_combos(seed, h, w)

    records: List[Frame] = []
    log_lines: List[str] = []
    for idx, frame in enumerate(frames):
        src = load_panorama(frame.image_path, h, w)
        stem = f"f{idx:06d}"
        variants = [("orig", None, src)]
        variants += [(f"e{k:03d}", eff, apply_effect(src, eff)) for k, eff in enumerate(effects)]
        for tag, eff, img in variants:
            rel = f"images/{stem}_{tag}.png"
            save_panorama(img, out_dir / rel)
            records.append(
                Frame(rel, frame.pose, frame.room, frame.condition, frame.sequence + "_aug")
            )
            log_lines.append(
                json.dumps({"image": rel, "source": str(frame.image_path), "effect": eff.to_dict() if eff else None})
            )
        logger.debug("augmented frame %d (%s)", idx, frame.image_path)

    (out_dir / "effects.jsonl").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    manifest = Manifest(records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest
