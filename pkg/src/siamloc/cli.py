"""Command-line entry point: ``siamloc <command> [options]``.

Anything that affects numerics comes from a flat ``key=value`` config file
(``--config``); flags carry paths, the seed and the thread count. Every
command writes a run-metadata record (config hash, seed, library versions)
next to its output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import re
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import __version__
from .dataset import CONDITIONS, Frame, Manifest, Pose, load_manifest, sample_pairs, save_manifest, subsample_map
from .model import BACKBONES, BackboneConfig, HeadConfig, build_model
from .train import TrainConfig

logger = logging.getLogger("siamloc")


class CommandError(Exception):
    """A user-facing failure; the message is printed and the exit status is 1."""


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    # model
    backbone: str = "simple2"
    pretrained_weights: str = ""
    head: Tuple[int, ...] = (500, 500, 5)
    image_height: int = 128
    image_width: int = 512
    input_mean: Tuple[float, ...] = ()
    input_std: Tuple[float, ...] = ()
    # training
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    pairs_per_epoch: int = 8486
    ratio_same: float = 0.5
    alpha: float = 1.0
    task: str = "metric"
    seed: int = 0
    resample_each_epoch: bool = True
    # augmentation
    augment_limit: int = 0  # 0 keeps every enumerated effect
    # evaluation
    threshold: float = 0.5
    eval_pairs: int = 2000
    eval_ratio_same: float = 0.5
    map_fraction: float = 1.0
    # gradient check
    gradcheck_eps: float = 1e-4
    gradcheck_params: int = 20
    gradcheck_tolerance: float = 1e-3
    # synthetic world
    synth_rooms: int = 4
    synth_frames_per_room: int = 100
    synth_spacing: float = 0.5

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            epochs=self.epochs,
            pairs_per_epoch=self.pairs_per_epoch,
            ratio_same=self.ratio_same,
            alpha=self.alpha,
            task=self.task,
            seed=self.seed,
            resample_each_epoch=self.resample_each_epoch,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.pretrained_weights or None)

    def head_config(self) -> HeadConfig:
        return HeadConfig(tuple(self.head))

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.image_height, self.image_width

    def validate(self) -> "RunConfig":
        self.train_config()
        self.head_config()
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {sorted(BACKBONES)}")
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("image_height and image_width must be at least 8")
        for name in ("input_mean", "input_std"):
            if len(getattr(self, name)) not in (0, 3):
                raise ValueError(f"{name} needs three comma-separated values or none")
        if self.input_std and min(self.input_std) <= 0:
            raise ValueError("input_std entries must be positive")
        if self.augment_limit < 0:
            raise ValueError("augment_limit must be non-negative")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.eval_pairs < 1:
            raise ValueError("eval_pairs must be at least 1")
        if not 0.0 <= self.eval_ratio_same <= 1.0:
            raise ValueError("eval_ratio_same must be in [0, 1]")
        if not 0.0 < self.map_fraction <= 1.0:
            raise ValueError("map_fraction must be in (0, 1]")
        if not self.gradcheck_eps > 0 or self.gradcheck_params < 1 or not self.gradcheck_tolerance > 0:
            raise ValueError("gradcheck_eps and gradcheck_tolerance must be positive, gradcheck_params >= 1")
        if self.synth_rooms < 2 or self.synth_frames_per_room < 4 or not self.synth_spacing > 0:
            raise ValueError("synthetic world needs >= 2 rooms, >= 4 frames per room and a positive spacing")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(default, tuple):
        if not raw:
            return ()
        kind = int if name == "head" else float
        return tuple(kind(v) for v in raw.split(","))
    return type(default)(raw)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key=value`` lines (``#`` comments, blank lines allowed); unknown keys are errors."""
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw, known[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(**values)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def load_run_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    cfg = RunConfig() if path is None else parse_run_config(Path(path).read_text(encoding="utf-8"), str(path))
    if seed is not None:
        cfg = RunConfig(**{**asdict(cfg), "seed": int(seed)})
    return cfg.validate()


def run_metadata(command: str, cfg: RunConfig, inputs: Sequence[str]) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "inputs": [str(p) for p in inputs],
        "versions": {
            "siamloc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }


def write_metadata(out: Path, command: str, cfg: RunConfig, inputs: Sequence[str]) -> Path:
    """``out/run.json`` for directory outputs, ``<out>.run.json`` for file outputs."""
    path = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    path.write_text(json.dumps(run_metadata(command, cfg, inputs), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

POSE_RE = re.compile(r"_x(-?[0-9.eE+-]+?)_y(-?[0-9.eE+-]+?)_a(-?[0-9.eE+-]+?)\.[A-Za-z]+$")
INDEX_FILE = "places.lst"


def _condition_of(sequence: str) -> str:
    for cond in CONDITIONS:
        if cond in sequence.lower():
            return cond
    raise CommandError(f"sequence {sequence!r}: name does not contain a lighting condition {CONDITIONS[:3]}")


def ingest_folder(src: Path, manifest_dir: Path) -> Manifest:
    """Collect frames from a COLD-style folder.

    Layout: one sub-directory per sequence whose name contains the lighting
    condition; each holds ``places.lst`` with ``<image path> <room>`` lines.
    Image file names end in ``_x<float>_y<float>_a<float>.<ext>``.
    """
    if not src.is_dir():
        raise CommandError(f"{src}: not a directory")
    sequences = sorted(p for p in src.iterdir() if p.is_dir() and (p / INDEX_FILE).is_file())
    frames: List[Frame] = []
    for seq in sequences:
        condition = _condition_of(seq.name)
        index = seq / INDEX_FILE
        for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            where = f"{index}:{lineno}"
            parts = line.split()
            if len(parts) != 2:
                raise CommandError(f"{where}: expected '<image> <room>', got {line!r}")
            name, room = parts
            image = seq / name
            if not image.is_file():
                raise CommandError(f"{where}: image {name} not found")
            m = POSE_RE.search(Path(name).name)
            if m is None:
                raise CommandError(f"{where}: no _x.._y.._a.. pose in file name {name!r}")
            try:
                pose = Pose(float(m.group(1)), float(m.group(2)), float(m.group(3)))
            except ValueError as exc:
                raise CommandError(f"{where}: bad pose in {name!r}: {exc}") from None
            rel = os.path.relpath(image.resolve(), manifest_dir.resolve())
            frames.append(Frame(Path(rel).as_posix(), pose, room, condition, seq.name))
    if not frames:
        raise CommandError(f"{src}: no frames found (expected <sequence>/{INDEX_FILE})")
    return Manifest(frames, manifest_dir)


def room_count_table(manifest: Manifest) -> str:
    counts = manifest.room_counts()
    width = max(12, max(len(r) for r in counts) + 2)
    lines = [f"{'room':<{width}}{'images':>8}"]
    lines += [f"{room:<{width}}{n:>8}" for room, n in counts.items()]
    lines.append(f"{'total':<{width}}{len(manifest):>8}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _model_from_config(cfg: RunConfig):
    return build_model(
        cfg.backbone_config(),
        cfg.head_config(),
        seed=cfg.seed,
        input_size=cfg.image_size,
        input_mean=cfg.input_mean or None,
        input_std=cfg.input_std or None,
    )


def _load_model(path: str):
    from .checkpoint import load_model

    model, header = load_model(path)
    return model, header


def cmd_ingest(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    manifest = ingest_folder(Path(args.src), out.parent)
    save_manifest(manifest, out)
    write_metadata(out, "ingest", cfg, [args.src])
    print(room_count_table(manifest))
    print(f"K_b {manifest.k_b:.4f} m")
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    from .synthetic import generate_synthetic_world

    out = Path(args.out)
    train, test, map_ = generate_synthetic_world(
        cfg.synth_rooms, cfg.synth_frames_per_room, cfg.synth_spacing, cfg.image_size, cfg.seed, out
    )
    write_metadata(out, "synth", cfg, [])
    print(f"train {len(train)}  test {len(test)}  map {len(map_)}  K_b {train.k_b:.4f} m  -> {out}")
    return 0


def cmd_augment(args, cfg: RunConfig) -> int:
    from .augment import augment_corpus, enumerate_combos

    manifest = load_manifest(args.manifest).absolute()
    combos = enumerate_combos(cfg.seed, *cfg.image_size)
    if cfg.augment_limit:
        combos = combos[: cfg.augment_limit]
    out = Path(args.out)
    result = augment_corpus(list(manifest.frames), cfg.seed, out, cfg.image_size, combos)
    write_metadata(out, "augment", cfg, [args.manifest])
    print(f"{len(manifest)} frames x {len(combos) + 1} variants = {len(result)} images -> {out / 'manifest.txt'}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    from .checkpoint import save_model
    from .train import train

    manifest = load_manifest(args.manifest)
    tc = cfg.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _model_from_config(cfg)
    save_model(model, out / "initial.ckpt", tc.alpha, {"epoch": -1, "config": asdict(tc)})
    write_metadata(out, "train", cfg, [args.manifest])

    def report(st):
        print(f"epoch {st.epoch:3d}  mean loss {st.mean_loss:.6f}  same {st.n_same}  diff {st.n_diff}  {st.seconds:.1f} s",
              flush=True)

    _, stats = train(model, manifest, tc, checkpoint_dir=out if tc.epochs else None, progress=report)
    if stats:
        save_model(model, out / "final.ckpt", tc.alpha, {"epoch": stats[-1].epoch, "config": asdict(tc)})
    print(f"checkpoints -> {out}")
    return 0


def cmd_build_map(args, cfg: RunConfig) -> int:
    from .localize import build_map, save_map

    model, header = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if cfg.map_fraction < 1.0:
        target = max(1, int(round(cfg.map_fraction * len(manifest))))
        manifest = subsample_map(manifest, target)
    vmap = build_map(model, manifest)
    out = Path(args.out)
    save_map(vmap, out, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    write_metadata(out, "build-map", cfg, [args.checkpoint, args.manifest])
    print(f"map of {len(vmap)} entries, D={vmap.descriptor_dim} -> {out}")
    return 0


def cmd_eval_room(args, cfg: RunConfig) -> int:
    from .localize import eval_room_manifest, write_records

    model, _ = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    pairs = sample_pairs(manifest, cfg.eval_pairs, cfg.eval_ratio_same, "room_binary", cfg.seed)
    rep = eval_room_manifest(model, manifest, pairs, cfg.threshold)
    print(rep.table())
    if args.out:
        out = Path(args.out)
        write_records(out, [rep.record()])
        write_metadata(out, "eval-room", cfg, [args.checkpoint, args.manifest])
    return 0


def cmd_eval_loc(args, cfg: RunConfig) -> int:
    from .localize import eval_localization, load_map, write_records

    model, _ = _load_model(args.checkpoint)
    vmap = load_map(args.map)
    test = load_manifest(args.test)
    rep = eval_localization(model, vmap, test)
    print(rep.table())
    print(f"global mean error {rep.mean_error:.4f} m")
    if args.out:
        out = Path(args.out)
        write_records(out, rep.records())
        write_metadata(out, "eval-loc", cfg, [args.checkpoint, args.map, args.test])
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .imaging import to_network_input
    from .train import gradient_check

    model = _model_from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.image_size
    a, b = (to_network_input(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), cfg.input_mean or None,
                             cfg.input_std or None) for _ in range(2))
    y = float(rng.uniform(0.0, 1.0))
    err = gradient_check(model, (a, b, y), cfg.alpha, cfg.gradcheck_eps, cfg.gradcheck_params, cfg.seed)
    ok = err <= cfg.gradcheck_tolerance
    print(f"{cfg.backbone} {h}x{w}: max relative error {err:.3e} over {cfg.gradcheck_params} parameters "
          f"({'ok' if ok else 'FAILED'}, tolerance {cfg.gradcheck_tolerance:g})")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"max_relative_error": err, "ok": ok}, sort_keys=True) + "\n", encoding="utf-8")
        write_metadata(out, "gradcheck", cfg, [])
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run config file")
    common.add_argument("--seed", type=int, help="overrides the config's seed")
    common.add_argument("--workers", type=int, default=1, help="torch threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="siamloc", description="Siamese descriptor training and panoramic localization.")
    parser.add_argument("--version", action="version", version=f"siamloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="build a manifest from a COLD-style folder")
    p.add_argument("src")
    p.add_argument("--out", required=True, help="manifest file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic multi-room world")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", parents=[common], help="write the augmented corpus of a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a Siamese network")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-map", parents=[common], help="embed map frames into a visual map")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="map file to write")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("eval-room", parents=[common], help="room discrimination accuracy")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", help="jsonl report")
    p.set_defaults(func=cmd_eval_room)

    p = sub.add_parser("eval-loc", parents=[common], help="global localization error")
    p.add_argument("checkpoint")
    p.add_argument("map")
    p.add_argument("test")
    p.add_argument("--out", help="jsonl report")
    p.set_defaults(func=cmd_eval_loc)

    p = sub.add_parser("gradcheck", parents=[common], help="backprop vs finite differences")
    p.add_argument("--out", help="json result")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.workers < 1:
        print("siamloc: --workers must be at least 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.workers)
    try:
        cfg = load_run_config(args.config, args.seed)
        return args.func(args, cfg)
    except (CommandError, ValueError, OSError, KeyError) as exc:
        print(f"siamloc {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
