"""Visual maps, nearest-descriptor retrieval and the two evaluation protocols."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import read_checkpoint, write_checkpoint
from .dataset import Manifest, PairSpec, Pose
from .model import SiameseNet
from .train import ImageCache


@dataclass
class VisualMap:
    descriptors: np.ndarray  # (N, D) float64
    poses: List[Pose]
    rooms: List[str]
    source: str = ""

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or len(self.descriptors) == 0:
            raise ValueError("a visual map needs a non-empty (N, D) descriptor matrix")
        if not (len(self.poses) == len(self.rooms) == len(self.descriptors)):
            raise ValueError("descriptor, pose and room counts differ")

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class LocalizationReport:
    errors: np.ndarray
    matches: np.ndarray
    conditions: List[str]
    mean_by_condition: Dict[str, float] = field(default_factory=dict)
    median_by_condition: Dict[str, float] = field(default_factory=dict)
    count_by_condition: Dict[str, int] = field(default_factory=dict)
    mean_error: float = 0.0
    median_error: float = 0.0

    def records(self) -> List[dict]:
        rows = [
            {"condition": c, "n": self.count_by_condition[c], "mean_m": self.mean_by_condition[c],
             "median_m": self.median_by_condition[c]}
            for c in self.count_by_condition
        ]
        rows.append({"condition": "all", "n": int(len(self.errors)), "mean_m": self.mean_error,
                     "median_m": self.median_error})
        return rows

    def table(self) -> str:
        lines = [f"{'condition':<12}{'frames':>8}{'mean (m)':>12}{'median (m)':>12}"]
        for r in self.records():
            lines.append(f"{r['condition']:<12}{r['n']:>8}{r['mean_m']:>12.4f}{r['median_m']:>12.4f}")
        return "\n".join(lines)


@dataclass
class RoomReport:
    n_same: int
    n_diff: int
    correct_same: int
    correct_diff: int

    @property
    def total(self) -> int:
        return self.n_same + self.n_diff

    @property
    def global_accuracy(self) -> float:
        return 100.0 * (self.correct_same + self.correct_diff) / self.total

    @property
    def same_accuracy(self) -> float:
        return 100.0 * self.correct_same / self.n_same if self.n_same else float("nan")

    @property
    def diff_accuracy(self) -> float:
        return 100.0 * self.correct_diff / self.n_diff if self.n_diff else float("nan")

    def confusion(self) -> Dict[str, int]:
        """Counts keyed by truth/prediction."""
        return {
            "same_pred_same": self.correct_same,
            "same_pred_diff": self.n_same - self.correct_same,
            "diff_pred_diff": self.correct_diff,
            "diff_pred_same": self.n_diff - self.correct_diff,
        }

    def record(self) -> dict:
        return {
            "pairs": self.total,
            "global_acc": self.global_accuracy,
            "same_acc": self.same_accuracy,
            "diff_acc": self.diff_accuracy,
            **self.confusion(),
        }

    def table(self) -> str:
        return (
            f"pairs {self.total} (same {self.n_same}, different {self.n_diff})\n"
            f"global accuracy    {self.global_accuracy:8.2f} %\n"
            f"same-room accuracy {self.same_accuracy:8.2f} %\n"
            f"diff-room accuracy {self.diff_accuracy:8.2f} %"
        )


def embed_manifest(model: SiameseNet, manifest: Manifest, batch_size: int = 32, cache: Optional[ImageCache] = None) -> np.ndarray:
    """Descriptors for every frame of ``manifest``, in order, as an (N, D) array."""
    cache = cache or ImageCache.for_model(manifest, model)
    model.eval()
    out = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for start in range(0, len(manifest), batch_size):
            idx = range(start, min(start + batch_size, len(manifest)))
            out.append(model.embed(cache.batch(list(idx)).to(dtype)).double().numpy())
    return np.concatenate(out)


def build_map(model: SiameseNet, map_frames: Manifest, batch_size: int = 32) -> VisualMap:
    if map_frames is None or len(map_frames) == 0:
        raise ValueError("map manifest is empty")
    desc = embed_manifest(model, map_frames, batch_size)
    return VisualMap(desc, [f.pose for f in map_frames], [f.room for f in map_frames], str(map_frames.root))


def retrieve(vmap: VisualMap, query) -> Tuple[int, Pose, float]:
    """Nearest map entry to ``query``; the lowest index wins ties."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (vmap.descriptor_dim,):
        raise ValueError(f"query has shape {q.shape}, map descriptors have dimension {vmap.descriptor_dim}")
    # accumulate dimension by dimension so the rounding does not depend on numpy's reduction order
    sq = np.zeros(len(vmap))
    for d in range(vmap.descriptor_dim):
        sq += (vmap.descriptors[:, d] - q[d]) ** 2
    k = int(np.argmin(sq))
    return k, vmap.poses[k], float(np.sqrt(sq[k]))


def retrieve_many(vmap: VisualMap, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != vmap.descriptor_dim:
        raise ValueError(f"queries have shape {queries.shape}, map dimension is {vmap.descriptor_dim}")
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for n, q in enumerate(queries):
        idx[n], _, dist[n] = retrieve(vmap, q)
    return idx, dist


def eval_room(model: SiameseNet, pairs: Sequence, threshold: float = 0.5) -> RoomReport:
    """Room discrimination on ``(image_a, image_b, truth)`` triples.

    ``truth`` is 0 for same-room pairs and 1 otherwise; a pair is predicted
    same-room when its descriptor distance is below ``threshold``.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if len(pairs) == 0:
        raise ValueError("no pairs to evaluate")
    from .model import forward

    truths, dists = [], []
    for a, b, truth in pairs:
        fa, fb = forward(model, a), forward(model, b)
        dists.append(float(np.sqrt(np.sum((fa.astype(np.float64) - fb) ** 2))))
        truths.append(int(truth))
    return room_report(np.array(dists), np.array(truths), threshold)


def room_report(distances: np.ndarray, truths: np.ndarray, threshold: float = 0.5) -> RoomReport:
    pred_diff = distances >= threshold
    truth_diff = truths.astype(bool)
    return RoomReport(
        n_same=int(np.sum(~truth_diff)),
        n_diff=int(np.sum(truth_diff)),
        correct_same=int(np.sum(~truth_diff & ~pred_diff)),
        correct_diff=int(np.sum(truth_diff & pred_diff)),
    )


def eval_room_manifest(
    model: SiameseNet,
    manifest: Manifest,
    pairs: Sequence[PairSpec],
    threshold: float = 0.5,
    descriptors: Optional[np.ndarray] = None,
) -> RoomReport:
    """Room discrimination on index pairs into ``manifest`` (each frame embedded once)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if len(pairs) == 0:
        raise ValueError("no pairs to evaluate")
    desc = descriptors if descriptors is not None else embed_manifest(model, manifest)
    i = np.array([p.i for p in pairs])
    j = np.array([p.j for p in pairs])
    d = np.sqrt(((desc[i] - desc[j]) ** 2).sum(axis=1))
    truths = np.array([0 if manifest[a].room == manifest[b].room else 1 for a, b in zip(i, j)])
    return room_report(d, truths, threshold)


def localization_report(errors: np.ndarray, matches: np.ndarray, conditions: Sequence[str]) -> LocalizationReport:
    errors = np.asarray(errors, dtype=np.float64)
    rep = LocalizationReport(errors=errors, matches=np.asarray(matches), conditions=list(conditions))
    cond = np.array(conditions)
    for c in dict.fromkeys(conditions):
        e = errors[cond == c]
        rep.count_by_condition[c] = int(len(e))
        rep.mean_by_condition[c] = float(np.mean(e))
        rep.median_by_condition[c] = float(np.median(e))
    rep.mean_error = float(np.mean(errors))
    rep.median_error = float(np.median(errors))
    return rep


def eval_localization(
    model: SiameseNet,
    vmap: VisualMap,
    test_frames: Manifest,
    descriptors: Optional[np.ndarray] = None,
) -> LocalizationReport:
    """Planar error between each test frame's pose and the pose of its nearest map descriptor."""
    if len(vmap) == 0 or len(test_frames) == 0:
        raise ValueError("map and test set must be non-empty")
    q = descriptors if descriptors is not None else embed_manifest(model, test_frames)
    if q.shape[1] != vmap.descriptor_dim:
        raise ValueError(f"model descriptors have dimension {q.shape[1]}, map has {vmap.descriptor_dim}")
    idx, _ = retrieve_many(vmap, q)
    errors = np.array(
        [vmap.poses[k].planar_distance(f.pose) for k, f in zip(idx, test_frames.frames)]
    )
    return localization_report(errors, idx, [f.condition for f in test_frames.frames])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_map(vmap: VisualMap, path, metadata: Optional[dict] = None) -> None:
    header = {
        "type": "visual_map",
        "descriptor_dim": vmap.descriptor_dim,
        "source": vmap.source,
        "entries": [[p.x, p.y, p.theta, r] for p, r in zip(vmap.poses, vmap.rooms)],
        "metadata": dict(metadata or {}),
    }
    write_checkpoint(path, header, OrderedDict(descriptors=vmap.descriptors))


def load_map(path) -> VisualMap:
    """Descriptors are stored as float32, so a reloaded map carries rounded values."""
    header, tensors = read_checkpoint(path)
    if header.get("type") != "visual_map":
        raise ValueError(f"{path}: not a visual map file")
    poses = [Pose(x, y, t) for x, y, t, _ in header["entries"]]
    rooms = [r for *_, r in header["entries"]]
    return VisualMap(tensors["descriptors"].astype(np.float64), poses, rooms, header.get("source", ""))


def write_records(path, records: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
