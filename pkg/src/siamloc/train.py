"""SGD-with-momentum training over sampled image pairs.

The update uses the gradient-accumulation form of classical momentum::

    v <- mu * v + g
    p <- p - lr * v

with ``g`` the mean gradient over a mini-batch of pairs.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import save_model
from .dataset import TASKS, Manifest, sample_pairs, split_counts
from .imaging import load_panorama, to_network_input
from .model import DEFAULT_ALPHA, SiameseNet, batch_backward, contrastive_loss, distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    pairs_per_epoch: int = 8486
    ratio_same: float = 0.5
    alpha: float = DEFAULT_ALPHA
    task: str = "metric"
    seed: int = 0
    resample_each_epoch: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.pairs_per_epoch < 1:
            raise ValueError("pairs_per_epoch must be at least 1")
        if not 0.0 < self.ratio_same < 1.0:
            raise ValueError("ratio_same must be in (0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    n_same: int
    n_diff: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class NonFiniteLossError(FloatingPointError):
    pass


def sgd_step(param, grad, velocity, lr: float, mu: float):
    """One momentum update; returns ``(new_param, new_velocity)``.

    Works on numpy arrays or torch tensors (new objects are returned).
    """
    if np.shape(param) != np.shape(grad) or np.shape(param) != np.shape(velocity):
        raise ValueError(
            f"shape mismatch: param {np.shape(param)}, grad {np.shape(grad)}, velocity {np.shape(velocity)}"
        )
    v_new = mu * velocity + grad
    return param - lr * v_new, v_new


class MomentumSGD:
    """In-place momentum SGD over a model's parameters (same rule as :func:`sgd_step`)."""

    def __init__(self, params, lr: float, momentum: float):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                v.mul_(self.momentum)
            else:
                v.mul_(self.momentum).add_(p.grad)
            p.sub_(self.lr * v)


class ImageCache:
    """Decoded uint8 images for a manifest, loaded lazily once each."""

    def __init__(self, manifest: Manifest, size: Tuple[int, int], mean=None, std=None):
        self.manifest = manifest
        self.size = size
        self.mean = mean
        self.std = std
        self._images: Dict[int, np.ndarray] = {}

    @classmethod
    def for_model(cls, manifest: Manifest, model: SiameseNet) -> "ImageCache":
        """Cache matching ``model``'s input size and normalization."""
        return cls(manifest, model.input_size, model.meta.get("input_mean"), model.meta.get("input_std"))

    def raw(self, idx: int) -> np.ndarray:
        img = self._images.get(idx)
        if img is None:
            try:
                img = load_panorama(self.manifest.image_path(idx), *self.size)
            except (OSError, ValueError) as exc:
                raise type(exc)(f"frame {idx} ({self.manifest[idx].image_path}): {exc}") from exc
            self._images[idx] = img
        return img

    def batch(self, indices: Sequence[int]) -> torch.Tensor:
        arr = np.stack([to_network_input(self.raw(i), self.mean, self.std) for i in indices])
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def epoch_seed(seed: int, epoch: int, resample: bool) -> int:
    return int(np.random.SeedSequence([seed, epoch if resample else 0]).generate_state(1)[0])


def train(
    model: SiameseNet,
    manifest: Manifest,
    config: TrainConfig,
    checkpoint_dir=None,
    cache: Optional[ImageCache] = None,
    progress=None,
):
    """Train ``model`` in place; returns ``(model, [EpochStats, ...])``.

    A checkpoint ``epoch_XXX.ckpt`` is written after every epoch, and
    ``stats.jsonl`` gets one line per epoch.
    """
    stats: List[EpochStats] = []
    if config.epochs == 0:
        return model, stats
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        stats_path = ckpt_dir / "stats.jsonl"
        stats_path.write_text("", encoding="utf-8")
    cache = cache or ImageCache.for_model(manifest, model)
    opt = MomentumSGD(model.parameters(), config.learning_rate, config.momentum)
    n_same_target, n_diff_target = split_counts(config.pairs_per_epoch, config.ratio_same)
    shuffle_rng = np.random.default_rng(config.seed)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if epoch == 0 or config.resample_each_epoch:
            pairs = sample_pairs(
                manifest,
                config.pairs_per_epoch,
                config.ratio_same,
                config.task,
                epoch_seed(config.seed, epoch, config.resample_each_epoch),
            )
        else:
            pairs = [pairs[k] for k in shuffle_rng.permutation(len(pairs))]
        n_same = sum(1 for p in pairs if manifest[p.i].room == manifest[p.j].room)
        assert (n_same, len(pairs) - n_same) == (n_same_target, n_diff_target)

        model.train()
        total = 0.0
        for b, start in enumerate(range(0, len(pairs), config.batch_size)):
            chunk = pairs[start : start + config.batch_size]
            x0 = cache.batch([p.i for p in chunk])
            x1 = cache.batch([p.j for p in chunk])
            y = np.array([p.label for p in chunk])
            opt.zero_grad()
            losses = batch_backward(model, x0, x1, y, config.alpha)
            batch_loss = float(np.sum(losses))
            if not math.isfinite(batch_loss):
                raise NonFiniteLossError(f"non-finite loss in epoch {epoch}, batch {b} (pairs {start}..)")
            opt.step()
            total += batch_loss
        model.eval()

        st = EpochStats(epoch, total / len(pairs), n_same, len(pairs) - n_same, time.perf_counter() - t0)
        stats.append(st)
        logger.info("epoch %d mean loss %.6f (%d same / %d diff)", epoch, st.mean_loss, st.n_same, st.n_diff)
        if progress is not None:
            progress(st)
        if ckpt_dir is not None:
            meta = {"epoch": epoch, "config": asdict(config)}
            save_model(model, ckpt_dir / f"epoch_{epoch:03d}.ckpt", config.alpha, meta)
            with open(stats_path, "a", encoding="utf-8") as fh:
                fh.write(st.to_json() + "\n")
    return model, stats


def _relative_error(a: float, n: float, floor: float = 1e-10) -> float:
    scale = max(abs(a), abs(n))
    if scale < floor:
        return 0.0
    return abs(a - n) / scale


def gradient_check(
    model: SiameseNet,
    pair,
    alpha: float = DEFAULT_ALPHA,
    eps: float = 1e-4,
    n_params: int = 20,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and central differences.

    ``pair`` is ``(image_a, image_b, y)`` with normalized HxWx3 images. The
    check runs on a float64 copy of the model; ``n_params`` scalar
    parameters are picked uniformly at random over all parameters.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if n_params < 1:
        raise ValueError("n_params must be at least 1")
    a, b, y = pair
    net = copy.deepcopy(model).double().eval()
    params = [p for p in net.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_params, int(offsets[-1])), replace=False)

    net.zero_grad(set_to_none=False)
    x0 = torch.from_numpy(np.asarray(a, dtype=np.float64).transpose(2, 0, 1)[None].copy())
    x1 = torch.from_numpy(np.asarray(b, dtype=np.float64).transpose(2, 0, 1)[None].copy())
    batch_backward(net, x0, x1, np.array([y]), alpha)

    def loss_now() -> float:
        with torch.no_grad():
            f0, f1 = net(x0, x1)
        return contrastive_loss(distance(f0[0].numpy(), f1[0].numpy()), y, alpha)

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k]
        local = int(flat - offsets[k])
        analytic = float(p.grad.reshape(-1)[local]) if p.grad is not None else 0.0
        with torch.no_grad():
            view = p.view(-1)
            orig = float(view[local])
            view[local] = orig + eps
            up = loss_now()
            view[local] = orig - eps
            down = loss_now()
            view[local] = orig
        numeric = (up - down) / (2 * eps)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst
