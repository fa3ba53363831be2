"""Binary container for model checkpoints and visual maps.

Layout (all integers little-endian)::

    magic        8 bytes  b"SIAMCKPT"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    n_tensors    uint32
    per tensor:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims (uint32 each)
        data     prod(dims) float32 values, little-endian, C order

Reading a file and writing it back reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np
import torch

MAGIC = b"SIAMCKPT"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


class CheckpointFormatError(ValueError):
    pass


def _header_bytes(header: Mapping) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode(header: Mapping, tensors: Mapping[str, object]) -> bytes:
    buf = io.BytesIO()
    hdr = _header_bytes(header)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode(data: bytes) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointFormatError("not a siamloc checkpoint (bad magic)")
    pos = 8
    try:
        version, hlen = struct.unpack_from("<II", view, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        header = json.loads(bytes(view[pos : pos + hlen]).decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
            tensors[name] = arr
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointFormatError(f"{len(data) - pos} trailing bytes after last tensor")
    return header, tensors


def is_checkpoint(path: PathLike) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(8) == MAGIC
    except OSError:
        return False


def write_checkpoint(path: PathLike, header: Mapping, tensors: Mapping[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(header, tensors))
    tmp.replace(path)


def read_checkpoint(path: PathLike):
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def model_header(model, alpha: float, metadata: Mapping = None) -> dict:
    meta = model.meta
    header = {
        "format_version": FORMAT_VERSION,
        "type": "model",
        "backbone": meta.get("backbone"),
        "head": list(meta.get("head", [])),
        "input_size": list(model.input_size),
        "alpha": float(alpha),
        "seed": meta.get("seed"),
        "training": dict(metadata or {}),
    }
    for key in ("input_mean", "input_std"):
        if meta.get(key) is not None:
            header[key] = list(meta[key])
    return header


def save_model(model, path: PathLike, alpha: float = 1.0, metadata: Mapping = None) -> None:
    write_checkpoint(path, model_header(model, alpha, metadata), model.state_dict())


def load_model(path: PathLike):
    """Rebuild a model from a checkpoint; returns ``(model, header)``."""
    from .model import BackboneConfig, HeadConfig, build_model, CheckpointLoadError

    header, tensors = read_checkpoint(path)
    if header.get("type") != "model":
        raise CheckpointFormatError(f"{path}: not a model checkpoint")
    model = build_model(
        BackboneConfig(header["backbone"]),
        HeadConfig(tuple(header["head"])),
        seed=header.get("seed") or 0,
        input_size=tuple(header["input_size"]),
        input_mean=header.get("input_mean"),
        input_std=header.get("input_std"),
    )
    state = model.state_dict()
    for name, target in state.items():
        if name not in tensors:
            raise CheckpointLoadError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(target.shape):
            raise CheckpointLoadError(
                f"{path}: shape mismatch for {name}: file {tensors[name].shape} vs model {tuple(target.shape)}"
            )
    with torch.no_grad():
        for name, target in state.items():
            target.copy_(torch.from_numpy(tensors[name]).to(target.dtype))
    return model, header


def state_tensors(model) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
