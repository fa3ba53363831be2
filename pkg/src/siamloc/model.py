"""Siamese descriptor network, contrastive loss and its gradients.

Both branches of the Siamese pair are the *same* module: a convolutional
feature extractor followed by a fully connected flattening head that emits a
D-dimensional descriptor. Descriptors are compared by Euclidean distance and
trained with the margin-based contrastive loss

    L = 1/2 (1 - y) d^2 + 1/2 y max(alpha - d, 0)^2

where ``y`` is 0 for similar pairs and 1 for dissimilar ones (continuous
values in between are used for normalized-distance labels).

The loss and its derivative with respect to the two descriptors are written
out in numpy; the network's own backward pass is delegated to torch autograd
by seeding it with those descriptor gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

CANONICAL_INPUT = (128, 512)
DEFAULT_ALPHA = 1.0

HEAD_PRESETS = {
    "v1": (500, 500, 5),
    "v2": (500, 100, 10),
    "v3": (1000, 1000, 10),
}

# conv plans; "M" is a 2x2 max-pool
VGG_PLANS = {
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg13": [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    "vgg19": [
        64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
        512, 512, 512, 512, "M", 512, 512, 512, 512, "M",
    ],
}
SIMPLE_PLANS = {
    "simple1": (3, 8, 16),
    "simple2": (3, 16, 32),
}
BACKBONES = (
    tuple(SIMPLE_PLANS)
    + ("alexnet_style",)
    + tuple(VGG_PLANS)
    + tuple(k + "_bn" for k in VGG_PLANS)
)


class CheckpointLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "simple2"
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")


@dataclass(frozen=True)
class HeadConfig:
    layer_sizes: Tuple[int, int, int] = (500, 500, 5)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) != 3 or any(s <= 0 for s in sizes):
            raise ValueError(f"head needs three positive widths, got {self.layer_sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def descriptor_dim(self) -> int:
        return self.layer_sizes[-1]


def make_backbone(kind: str) -> nn.Sequential:
    """Feature extractor ending in a spatial feature map (flattened by the head)."""
    layers = []
    if kind in SIMPLE_PLANS:
        in_ch = 3
        for out_ch in SIMPLE_PLANS[kind]:
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            in_ch = out_ch
        layers.append(nn.MaxPool2d(2, 2))
    elif kind == "alexnet_style":
        layers = [
            nn.Conv2d(3, 64, 11, stride=4, padding=2), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(64, 192, 5, padding=2), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2),
            nn.Conv2d(192, 384, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(384, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2),
        ]
    else:
        batch_norm = kind.endswith("_bn")
        plan = VGG_PLANS[kind[:-3] if batch_norm else kind]
        in_ch = 3
        for v in plan:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
                continue
            layers.append(nn.Conv2d(in_ch, v, 3, padding=1))
            if batch_norm:
                layers.append(nn.BatchNorm2d(v))
            layers.append(nn.ReLU(inplace=True))
            in_ch = v
    return nn.Sequential(*layers)


def make_head(in_features: int, sizes: Sequence[int]) -> nn.Sequential:
    a, b, d = sizes
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(in_features, a), nn.ReLU(inplace=True),
        nn.Linear(a, b), nn.ReLU(inplace=True),
        nn.Linear(b, d),
    )


class SiameseNet(nn.Module):
    """Shared-weight Siamese network. ``forward(x0, x1)`` runs both branches
    through the very same ``features``/``head`` modules."""

    def __init__(self, features: nn.Module, head: nn.Module, input_size=CANONICAL_INPUT, meta=None):
        super().__init__()
        self.features = features
        self.head = head
        self.input_size = tuple(int(v) for v in input_size)
        self.meta: Dict = dict(meta or {})

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def forward(self, x0: torch.Tensor, x1: torch.Tensor):
        return self.embed(x0), self.embed(x1)

    @property
    def descriptor_dim(self) -> int:
        return _last_linear(self.head).out_features


def _last_linear(module: nn.Module) -> nn.Linear:
    last = None
    for m in module.modules():
        if isinstance(m, nn.Linear):
            last = m
    if last is None:
        raise ValueError("head has no linear layer")
    return last


def init_parameters(model: nn.Module, seed: int) -> None:
    """He-uniform weights and zero biases for every conv/linear layer, keyed by ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
                m.reset_running_stats()


def build_model(
    backbone: BackboneConfig,
    head: HeadConfig,
    seed: int = 0,
    input_size=CANONICAL_INPUT,
    input_mean=None,
    input_std=None,
) -> SiameseNet:
    """``input_mean``/``input_std`` are optional per-channel statistics applied after /255;
    they travel with the model (and its checkpoints) so every consumer normalizes alike."""
    features = make_backbone(backbone.kind)
    h, w = input_size
    with torch.no_grad():
        n_flat = int(np.prod(features(torch.zeros(1, 3, h, w)).shape[1:]))
    if n_flat == 0:
        raise ValueError(f"input {h}x{w} is too small for backbone {backbone.kind}")
    model = SiameseNet(
        features,
        make_head(n_flat, head.layer_sizes),
        input_size,
        meta={"backbone": backbone.kind, "head": list(head.layer_sizes), "seed": int(seed)},
    )
    for key, value in (("input_mean", input_mean), ("input_std", input_std)):
        if value is not None:
            value = [float(v) for v in value]
            if len(value) != 3:
                raise ValueError(f"{key} needs three channel values")
            model.meta[key] = value
    if input_std is not None and min(model.meta["input_std"]) <= 0:
        raise ValueError("input_std entries must be positive")
    init_parameters(model, seed)
    if backbone.pretrained_weights:
        load_backbone_weights(model, backbone.pretrained_weights)
    model.eval()
    return model


def load_backbone_weights(model: SiameseNet, path: Union[str, Path]) -> None:
    """Copy ``features.*`` tensors from a torch state dict or a siamloc checkpoint."""
    from .checkpoint import is_checkpoint, read_checkpoint

    path = Path(path)
    if is_checkpoint(path):
        state = read_checkpoint(path)[1]
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
    own = model.state_dict()
    wanted = [k for k in own if k.startswith("features.")]
    for name in wanted:
        if name not in state:
            raise CheckpointLoadError(f"{path}: missing tensor {name}")
        src = torch.as_tensor(np.asarray(state[name]))
        if tuple(src.shape) != tuple(own[name].shape):
            raise CheckpointLoadError(
                f"{path}: shape mismatch for {name}: file {tuple(src.shape)} vs model {tuple(own[name].shape)}"
            )
    with torch.no_grad():
        for name in wanted:
            own[name].copy_(torch.as_tensor(np.asarray(state[name])).to(own[name].dtype))


def _as_batch(model: SiameseNet, images) -> torch.Tensor:
    """Accept one HxWx3 normalized image, a stack of them, or an NCHW tensor."""
    if isinstance(images, torch.Tensor) and images.ndim == 4 and images.shape[1] == 3:
        x = images
    else:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) images, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    if tuple(x.shape[2:]) != model.input_size:
        raise ValueError(f"model expects {model.input_size} inputs, got {tuple(x.shape[2:])}")
    dtype = next(model.parameters()).dtype
    return x.to(dtype)


def forward(model: SiameseNet, image) -> np.ndarray:
    """Descriptor(s) for normalized image(s); returns shape (D,) for a single image."""
    single = not (isinstance(image, torch.Tensor) and image.ndim == 4) and np.ndim(image) == 3
    with torch.no_grad():
        f = model.embed(_as_batch(model, image)).cpu().numpy()
    return f[0] if single else f


# ---------------------------------------------------------------------------
# distance and loss
# ---------------------------------------------------------------------------


def distance(f0, f1) -> float:
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ValueError(f"descriptor shapes differ: {f0.shape} vs {f1.shape}")
    return float(np.sqrt(np.sum((f0 - f1) ** 2)))


def _check_loss_args(d, y, alpha):
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if np.any(np.asarray(d) < 0):
        raise ValueError("distance must be non-negative")
    y = np.asarray(y)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("label y must lie in [0, 1]")


def contrastive_loss(d, y, alpha: float = DEFAULT_ALPHA):
    """Contrastive loss for distance(s) ``d`` and label(s) ``y``; broadcasts over arrays."""
    _check_loss_args(d, y, alpha)
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = 0.5 * (1.0 - y) * d**2 + 0.5 * y * np.maximum(alpha - d, 0.0) ** 2
    return float(out) if out.ndim == 0 else out


def loss_gradient_wrt_descriptors(f0, f1, y, alpha: float = DEFAULT_ALPHA):
    """(dL/df0, dL/df1). Works on single descriptors or on (B, D) batches with (B,) labels.

    At d = 0 the gradient is taken as zero.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    if f0.shape != f1.shape:
        raise ValueError(f"descriptor shapes differ: {f0.shape} vs {f1.shape}")
    diff = f0 - f1
    d = np.sqrt(np.sum(diff**2, axis=-1))
    _check_loss_args(d, y, alpha)
    y = np.asarray(y, dtype=np.float64)
    dl_dd = (1.0 - y) * d - y * np.maximum(alpha - d, 0.0)
    safe = np.where(d > 0, d, 1.0)
    scale = np.where(d > 0, dl_dd / safe, 0.0)
    g0 = scale[..., None] * diff
    return g0, -g0


def pair_loss(f0, f1, y, alpha: float = DEFAULT_ALPHA):
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    d = np.sqrt(np.sum((f0 - f1) ** 2, axis=-1))
    return contrastive_loss(d, y, alpha)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


def batch_backward(model: SiameseNet, x0, x1, y, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Accumulate gradients of the *mean* pair loss into ``param.grad``.

    Returns the per-pair losses. Both branches share parameters, so autograd
    sums their contributions into the same ``.grad`` buffers.
    """
    b0 = _as_batch(model, x0)
    b1 = _as_batch(model, x1)
    f0, f1 = model(b0, b1)
    f0n = f0.detach().cpu().numpy()
    f1n = f1.detach().cpu().numpy()
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (f0n.shape[0],))
    g0, g1 = loss_gradient_wrt_descriptors(f0n, f1n, y, alpha)
    n = f0n.shape[0]
    torch.autograd.backward(
        [f0, f1],
        [torch.from_numpy(g0 / n).to(f0.dtype), torch.from_numpy(g1 / n).to(f1.dtype)],
    )
    return pair_loss(f0n, f1n, y, alpha)


def backward(model: SiameseNet, pair, y: float, alpha: float = DEFAULT_ALPHA) -> Dict[str, torch.Tensor]:
    """Gradient of one pair's loss with respect to every shared parameter."""
    a, b = pair
    model.zero_grad(set_to_none=False)
    batch_backward(model, a, b, y, alpha)
    return {name: p.grad.detach().clone() for name, p in model.named_parameters()}
