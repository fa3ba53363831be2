"""Procedural panoramic rooms for desk-scale experiments.

Each room is an axis-aligned box. Its walls carry a room-specific base hue,
a slow hue and brightness wave around the perimeter and two soft lamps. A
panorama is rendered by casting several rays per image column to the nearest
wall, whose apparent height shrinks with distance. Images are therefore a
smooth function of (x, y) inside a room and differ in hue between rooms.

Neighbouring rooms differ in hue by only ROOM_HUE_STEP, so telling rooms
apart takes more than a global color average.

Rooms are tiled on a square grid, so the layout looks like a small floor
plan and the largest capture-point distance spans several rooms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from skimage.color import hsv2rgb

from .dataset import Frame, Manifest, Pose, save_manifest
from .imaging import save_panorama

WALL_MARGIN = 1.0  # meters between the outermost capture point and the wall
ROOM_GAP = 0.5  # meters between neighbouring rooms
CAMERA_HEIGHT = 1.0
WALL_HEIGHT = 2.5
FOCAL_SCALE = 0.25  # focal length in image heights; keeps near walls inside the frame
SUPERSAMPLE = 4  # rays per image column
ROOM_HUE_STEP = 0.06  # hue offset between consecutive rooms
HUE_SWING = 0.05
VALUE_SWING = 0.25
LAMPS_PER_ROOM = 2
LAMP_WIDTH = 0.08  # in wall lengths


@dataclass(frozen=True)
class Room:
    name: str
    hue: float
    x0: float
    y0: float
    x1: float
    y1: float
    phase: float
    lamps: Tuple[Tuple[float, float], ...]  # (perimeter position, hue shift)


def _room_layout(n_rooms: int, grid: int, spacing: float, rng: np.random.Generator) -> List[Room]:
    extent = (grid - 1) * spacing + 2 * WALL_MARGIN
    per_row = math.ceil(math.sqrt(n_rooms))
    rooms = []
    for r in range(n_rooms):
        gx, gy = r % per_row, r // per_row
        x0 = gx * (extent + ROOM_GAP)
        y0 = gy * (extent + ROOM_GAP)
        lamps = tuple(
            (float(rng.uniform(k, k + 1)), float(rng.uniform(0.1, 0.2))) for k in rng.choice(4, LAMPS_PER_ROOM, replace=False)
        )
        rooms.append(
            Room(
                name=f"R{r}",
                hue=(r * ROOM_HUE_STEP) % 1.0,
                x0=x0,
                y0=y0,
                x1=x0 + extent,
                y1=y0 + extent,
                phase=float(rng.uniform(0, 2 * np.pi)),
                lamps=lamps,
            )
        )
    return rooms


def _wall_colors(room: Room, x: float, y: float, phi: np.ndarray):
    """RGB wall color and distance along each viewing direction ``phi``."""
    dx, dy = np.cos(phi), np.sin(phi)
    with np.errstate(divide="ignore"):
        tx = np.where(dx > 0, (room.x1 - x) / dx, np.where(dx < 0, (room.x0 - x) / dx, np.inf))
        ty = np.where(dy > 0, (room.y1 - y) / dy, np.where(dy < 0, (room.y0 - y) / dy, np.inf))
    hit_x = tx <= ty
    dist = np.minimum(tx, ty)
    # wall index: 0 east, 1 north, 2 west, 3 south; s is the normalized position along it
    wall = np.where(hit_x, np.where(dx > 0, 0, 2), np.where(dy > 0, 1, 3))
    w_len = room.x1 - room.x0
    s = np.where(hit_x, (y + dist * dy - room.y0) / w_len, (x + dist * dx - room.x0) / w_len)

    # perimeter coordinate u in [0, 4), continuous around the room (counter-clockwise from the south-east corner)
    u = np.choose(wall, [s, 2.0 - s, 3.0 - s, 3.0 + s])
    ang = 0.5 * np.pi * u
    hue = (room.hue + HUE_SWING * np.sin(2.0 * ang + room.phase)) % 1.0
    sat = np.full(len(phi), 0.6)
    val = 0.55 + VALUE_SWING * np.cos(ang + room.phase)
    for centre, shift in room.lamps:
        gap = (u - centre + 2.0) % 4.0 - 2.0
        w = np.exp(-0.5 * (gap / LAMP_WIDTH) ** 2)
        sat = sat + (0.95 - sat) * w
        val = val + (0.95 - val) * w
        hue = (hue + shift * w) % 1.0
    return hsv2rgb(np.stack([hue, sat, val], axis=-1)[None])[0], dist


def render_view(room: Room, x: float, y: float, height: int = 128, width: int = 512, theta: float = 0.0) -> np.ndarray:
    """Panorama seen from (x, y) inside ``room``; column 0 looks along ``theta``.

    Each column averages SUPERSAMPLE rays and each row blends wall, ceiling and
    floor by exact vertical coverage, so pixels change continuously with the pose.
    """
    n = width * SUPERSAMPLE
    phi = theta + 2.0 * np.pi * (np.arange(n) + 0.5) / n
    wall_rgb, dist = _wall_colors(room, x, y, phi)

    # vertical extent of the wall (pinhole-like cylindrical projection)
    center = height / 2.0
    focal = height * FOCAL_SCALE
    top = center - focal * (WALL_HEIGHT - CAMERA_HEIGHT) / dist
    bottom = center + focal * CAMERA_HEIGHT / dist
    r0 = np.arange(height, dtype=np.float64)[:, None]
    r1 = r0 + 1.0
    cover_ceiling = np.clip(np.minimum(r1, top[None, :]) - r0, 0.0, 1.0)
    cover_wall = np.clip(np.minimum(r1, bottom[None, :]) - np.maximum(r0, top[None, :]), 0.0, 1.0)
    cover_floor = 1.0 - cover_ceiling - cover_wall

    rows = np.arange(height)
    ceiling = hsv2rgb(np.array([[[room.hue, 0.05, 0.92]]]))[0, 0]
    floor = hsv2rgb(np.stack([np.full(height, room.hue), np.full(height, 0.35),
                              0.25 + 0.1 * np.cos(rows / height * 6.0)], axis=-1)[None])[0]
    rgb = (
        cover_wall[..., None] * wall_rgb[None]
        + cover_ceiling[..., None] * ceiling
        + cover_floor[..., None] * floor[:, None, :]
    )
    rgb = rgb.reshape(height, width, SUPERSAMPLE, 3).mean(axis=2)
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _grid_offsets(grid: int, spacing: float, count: int, shift=(0.0, 0.0)) -> List[Tuple[float, float]]:
    """Serpentine traversal of a grid, truncated to ``count`` points."""
    pts = []
    for j in range(grid):
        cols = range(grid) if j % 2 == 0 else range(grid - 1, -1, -1)
        for i in cols:
            pts.append((i * spacing + shift[0], j * spacing + shift[1]))
    return pts[:count]


def generate_synthetic_world(
    n_rooms: int,
    frames_per_room: int,
    grid_spacing: float,
    image_size=(128, 512),
    seed: int = 0,
    out_dir=None,
):
    """Render train/test/map splits of a synthetic multi-room floor.

    Within each room the training frames sit on a serpentine grid with the
    given spacing, map frames at the grid cell centers and test frames on
    the cell edge midpoints, so the three splits never share a pose. Images
    are written below ``out_dir`` and the three manifests are saved there as
    ``train.txt``, ``test.txt`` and ``map.txt``. All splits share the K_b of
    the training split.
    """
    if n_rooms < 2:
        raise ValueError("need at least two rooms")
    if frames_per_room < 4:
        raise ValueError("need at least four frames per room")
    if not grid_spacing > 0:
        raise ValueError("grid spacing must be positive")
    h, w = image_size
    if h < 8 or w < 8:
        raise ValueError(f"image size {image_size} too small")
    if out_dir is None:
        raise ValueError("out_dir is required")
    out_dir = Path(out_dir)

    rng = np.random.default_rng(seed)
    grid = math.ceil(math.sqrt(frames_per_room))
    rooms = _room_layout(n_rooms, grid, grid_spacing, rng)
    half = grid_spacing / 2.0
    n_inner = max(1, (grid - 1) ** 2)

    splits = {
        "train": ((0.0, 0.0), frames_per_room, grid),
        "map": ((half, half), n_inner, grid - 1),
        "test": ((half, 0.0), n_inner, grid - 1),
    }
    frames = {name: [] for name in splits}
    for room in rooms:
        ox, oy = room.x0 + WALL_MARGIN, room.y0 + WALL_MARGIN
        for name, (shift, count, g) in splits.items():
            for k, (px, py) in enumerate(_grid_offsets(max(g, 1), grid_spacing, count, shift)):
                x, y = ox + px, oy + py
                rel = f"{name}/{room.name}_{k:04d}.png"
                save_panorama(render_view(room, x, y, h, w), out_dir / rel)
                frames[name].append(Frame(rel, Pose(x, y, 0.0), room.name, "synthetic", f"synth_{name}"))

    train = Manifest(frames["train"], out_dir)
    test = Manifest(frames["test"], out_dir, train.k_b)
    map_ = Manifest(frames["map"], out_dir, train.k_b)
    for name, m in (("train", train), ("test", test), ("map", map_)):
        save_manifest(m, out_dir / f"{name}.txt")
    return train, test, map_
