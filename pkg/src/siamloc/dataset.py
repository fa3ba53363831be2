"""Pose-annotated frame collections, pair labeling and pair sampling.

A manifest is a UTF-8 text file with one frame per line::

    kb=18.99
    image=seq/img0.png<TAB>x=0.1<TAB>y=2.3<TAB>theta=0.0<TAB>room=CR-A<TAB>condition=cloudy<TAB>sequence=seq

The ``kb=`` header is optional; when absent the maximum pairwise planar
distance is computed from the poses. Image paths are relative to the
manifest's directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .imaging import round_half_away

CONDITIONS = ("cloudy", "night", "sunny", "synthetic")
TASKS = ("room_binary", "metric")
FIELDS = ("image", "x", "y", "theta", "room", "condition", "sequence")


class ManifestError(ValueError):
    """Malformed manifest content; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)


def wrap_angle(theta: float) -> float:
    """Map an angle in radians into [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        x, y, theta = float(self.x), float(self.y), float(self.theta)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(theta)):
            raise ValueError(f"pose components must be finite, got {self}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "theta", wrap_angle(theta))

    def planar_distance(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Frame:
    image_path: str
    pose: Pose
    room: str
    condition: str = "cloudy"
    sequence: str = ""

    def __post_init__(self):
        if not self.room:
            raise ValueError("room label must be non-empty")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}, got {self.condition!r}")


@dataclass(frozen=True)
class PairSpec:
    i: int
    j: int
    label: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("a pair needs two distinct frames")
        if not 0.0 <= self.label <= 1.0:
            raise ValueError(f"label must be in [0, 1], got {self.label}")


class Manifest:
    """Ordered, immutable list of frames plus the building's distance normalizer."""

    def __init__(self, frames: Sequence[Frame], root: Union[str, Path, None] = None, k_b: Optional[float] = None):
        frames = tuple(frames)
        if not frames:
            raise ValueError("a manifest needs at least one frame")
        self.frames = frames
        self.root = Path(root) if root is not None else Path(".")
        self.k_b = float(k_b) if k_b is not None else compute_kb(frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, idx) -> Frame:
        return self.frames[idx]

    def __iter__(self):
        return iter(self.frames)

    def image_path(self, idx: int) -> Path:
        p = Path(self.frames[idx].image_path)
        return p if p.is_absolute() else self.root / p

    def positions(self) -> np.ndarray:
        return np.array([[f.pose.x, f.pose.y] for f in self.frames], dtype=np.float64)

    def rooms(self) -> List[str]:
        return [f.room for f in self.frames]

    def room_counts(self) -> dict:
        counts: dict = {}
        for f in self.frames:
            counts[f.room] = counts.get(f.room, 0) + 1
        return dict(sorted(counts.items()))

    def subset(self, indices: Iterable[int], k_b: Optional[float] = None) -> "Manifest":
        """Frames at ``indices``; keeps this manifest's K_b unless overridden."""
        return Manifest([self.frames[i] for i in indices], self.root, self.k_b if k_b is None else k_b)

    def absolute(self) -> "Manifest":
        """Copy whose frames carry absolute image paths."""
        frames = [replace(f, image_path=str(self.image_path(i).resolve())) for i, f in enumerate(self.frames)]
        return Manifest(frames, self.root, self.k_b)


def compute_kb(frames: Sequence[Frame]) -> float:
    """Maximum pairwise planar distance between frame positions.

    The farthest pair always lies on the convex hull, so only hull vertices
    are compared; degenerate (collinear or tiny) inputs fall back to a full scan.
    """
    if len(frames) == 0:
        raise ValueError("compute_kb needs at least one frame")
    pts = np.array([[f.pose.x, f.pose.y] for f in frames], dtype=np.float64)
    pts = np.unique(pts, axis=0)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 3:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(pdist(pts).max())


def label_metric(p_i: Pose, p_j: Pose, r_i: str, r_j: str, k_b: float) -> float:
    """Normalized-distance similarity label: position distance over K_b within a room, else 1."""
    if not k_b > 0:
        raise ValueError(f"k_b must be positive, got {k_b}")
    if r_i != r_j:
        return 1.0
    return min(1.0, p_i.planar_distance(p_j) / k_b)


def label_room(r_i: str, r_j: str) -> float:
    """0 for frames from the same room, 1 otherwise."""
    return 0.0 if r_i == r_j else 1.0


def split_counts(n_pairs: int, ratio_same: float) -> Tuple[int, int]:
    n_same = int(round_half_away(n_pairs * ratio_same))
    return n_same, n_pairs - n_same


def sample_pairs(
    manifest: Manifest,
    n_pairs: int,
    ratio_same: float,
    task: str = "room_binary",
    seed: int = 0,
) -> List[PairSpec]:
    """Draw exactly ``round(n_pairs * ratio_same)`` same-room pairs and the rest cross-room.

    The first frame of a pair is uniform over eligible frames and the partner
    is uniform over the matching stratum. The returned list is shuffled.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    if not 0.0 <= ratio_same <= 1.0:
        raise ValueError(f"ratio_same must be in [0, 1], got {ratio_same}")
    n_same, n_diff = split_counts(n_pairs, ratio_same)

    rooms = np.array(manifest.rooms())
    names, room_idx = np.unique(rooms, return_inverse=True)
    members = [np.flatnonzero(room_idx == r) for r in range(len(names))]
    sizes = np.array([len(m) for m in members])

    if n_same and not np.any(sizes >= 2):
        raise ValueError("same-room pairs requested but no room has two frames")
    if n_diff and len(names) < 2:
        raise ValueError("different-room pairs requested but the manifest has a single room")

    rng = np.random.default_rng(seed)
    pairs: List[Tuple[int, int]] = []

    if n_same:
        eligible = np.flatnonzero(sizes[room_idx] >= 2)
        firsts = eligible[rng.integers(0, len(eligible), n_same)]
        for i in firsts:
            group = members[room_idx[i]]
            k = rng.integers(0, len(group) - 1)
            j = _pick_other(group, i, int(k))
            pairs.append((int(i), int(j)))
    if n_diff:
        outside = [np.flatnonzero(room_idx != r) for r in range(len(names))]
        firsts = rng.integers(0, len(rooms), n_diff)
        for i in firsts:
            candidates = outside[room_idx[i]]
            j = candidates[rng.integers(0, len(candidates))]
            pairs.append((int(i), int(j)))

    order = rng.permutation(len(pairs))
    out = []
    for idx in order:
        i, j = pairs[idx]
        fi, fj = manifest[i], manifest[j]
        if task == "room_binary":
            y = label_room(fi.room, fj.room)
        else:
            y = label_metric(fi.pose, fj.pose, fi.room, fj.room, manifest.k_b)
        out.append(PairSpec(i, j, y))
    return out


def _pick_other(group: np.ndarray, i: int, k: int) -> int:
    # k-th member of ``group`` after removing i
    pos = int(np.searchsorted(group, i))
    return int(group[k if k < pos else k + 1])


def subsample_map(manifest: Manifest, target: int) -> Manifest:
    """Keep ``target`` frames at evenly spaced positions of the sequence order."""
    n = len(manifest)
    if not 1 <= target <= n:
        raise ValueError(f"target must be in [1, {n}], got {target}")
    if target == 1:
        idx = [0]
    else:
        raw = round_half_away(np.arange(target) * (n - 1) / (target - 1)).astype(int)
        idx = list(dict.fromkeys(raw.tolist()))
    return manifest.subset(idx)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def _parse_line(line: str, lineno: int) -> Frame:
    fields = {}
    for token in line.split("\t"):
        if "=" not in token:
            raise ManifestError(f"expected key=value, got {token!r}", lineno)
        key, value = token.split("=", 1)
        if key in fields:
            raise ManifestError(f"duplicate field {key!r}", lineno)
        fields[key] = value
    missing = [k for k in FIELDS if k not in fields]
    if missing:
        raise ManifestError(f"missing field(s) {', '.join(missing)}", lineno)
    unknown = sorted(set(fields) - set(FIELDS))
    if unknown:
        raise ManifestError(f"unknown field(s) {', '.join(unknown)}", lineno)
    try:
        x, y, theta = float(fields["x"]), float(fields["y"]), float(fields["theta"])
        pose = Pose(x, y, theta)
    except ValueError as exc:
        raise ManifestError(f"bad pose: {exc}", lineno) from None
    try:
        return Frame(fields["image"], pose, fields["room"], fields["condition"], fields["sequence"])
    except ValueError as exc:
        raise ManifestError(str(exc), lineno) from None


def parse_manifest(text: str, root: Union[str, Path] = ".") -> Manifest:
    frames: List[Frame] = []
    k_b: Optional[float] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if line.startswith("kb="):
            if frames or k_b is not None:
                raise ManifestError("kb header must come first and only once", lineno)
            try:
                k_b = float(line[3:])
            except ValueError:
                raise ManifestError(f"bad kb value {line[3:]!r}", lineno) from None
            if not (math.isfinite(k_b) and k_b >= 0):
                raise ManifestError(f"kb must be finite and non-negative, got {k_b}", lineno)
            continue
        frames.append(_parse_line(line, lineno))
    if not frames:
        raise ValueError("manifest contains no frames")
    return Manifest(frames, root, k_b)


def load_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_manifest(text, path.parent)


def format_manifest(manifest: Manifest, include_kb: bool = True) -> str:
    lines = []
    if include_kb:
        lines.append(f"kb={manifest.k_b!r}")
    for f in manifest.frames:
        for value in (f.image_path, f.room, f.sequence):
            if "\t" in value or "\n" in value:
                raise ValueError(f"field value {value!r} contains a tab or newline")
        lines.append(
            "\t".join(
                [
                    f"image={f.image_path}",
                    f"x={f.pose.x!r}",
                    f"y={f.pose.y!r}",
                    f"theta={f.pose.theta!r}",
                    f"room={f.room}",
                    f"condition={f.condition}",
                    f"sequence={f.sequence}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def save_manifest(manifest: Manifest, path: Union[str, Path], include_kb: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(manifest, include_kb), encoding="utf-8")
