"""Procedural box-room RGB-D rendering and on-disk dataset handling.

Rooms are axis-aligned boxes with axis-aligned furniture; a panorama is
rendered by casting one ray per pixel from the camera. Azimuth runs
[-pi, pi) across columns (so column 0 and column W-1 are adjacent
directions) and elevation runs pi/2 (row 0, straight up) down to -pi/2
(last row, straight down).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .pano import Panorama, _round_half_up

SPLITS = ("train", "val", "test")
MAX_DEPTH_MM = 65535  # 16-bit depth PNGs store millimeters


@dataclass
class Furniture:
    """An axis-aligned colored box sitting inside the room."""

    min_corner: tuple[float, float, float]
    size: tuple[float, float, float]
    color: tuple[float, float, float]  # albedo in [0, 1]

    @property
    def max_corner(self):
        return tuple(m + s for m, s in zip(self.min_corner, self.size))


@dataclass
class RoomSpec:
    """Geometry and appearance of one synthetic room.

    size is (x, y, z) extent in meters; the camera must be strictly inside.
    wall_colors are the albedos of the x=size_x, x=0, y=size_y, y=0 faces.
    """

    size: tuple[float, float, float] = (4.0, 4.0, 3.0)
    camera: tuple[float, float, float] = (2.0, 2.0, 1.5)
    furniture: list[Furniture] = field(default_factory=list)
    wall_colors: tuple = ((0.8, 0.8, 0.75),) * 4
    floor_color: tuple[float, float, float] = (0.55, 0.4, 0.3)
    ceiling_color: tuple[float, float, float] = (0.9, 0.9, 0.9)
    seed: int = 0

    def validate(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("room dimensions must be positive")
        if not all(0 < c < s for c, s in zip(self.camera, self.size)):
            raise ValueError(f"camera {self.camera} must be strictly inside room {self.size}")
        if len(self.wall_colors) != 4:
            raise ValueError("need one wall color per vertical face")
        for box in self.furniture:
            if any(s <= 0 for s in box.size):
                raise ValueError("furniture sizes must be positive")
            if any(m < 0 or m + s > r for m, s, r in zip(box.min_corner, box.size, self.size)):
                raise ValueError(f"furniture box {box.min_corner}/{box.size} leaves the room")

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(s * s for s in self.size))


def unit_directions(height: int, width: int, yaw_columns: int = 0):
    """Per-pixel unit ray directions for an equirectangular grid.

    yaw_columns rotates the camera yaw by whole columns (2*pi/W each), which
    keeps a yaw-rotated render bitwise equal to a column roll of the original.
    """
    cols = (np.arange(width) + yaw_columns) % width
    theta = -np.pi + 2.0 * np.pi * cols / width
    phi = np.pi / 2 - np.pi * np.arange(height) / (height - 1)
    cos_phi = np.cos(phi)[:, None]
    dx = cos_phi * np.cos(theta)[None, :]
    dy = cos_phi * np.sin(theta)[None, :]
    dz = np.broadcast_to(np.sin(phi)[:, None], (height, width)).copy()
    return np.stack([dx, dy, dz], axis=-1)


def cast_rays(spec: RoomSpec, dirs: np.ndarray):
    """Distance and albedo of the nearest surface along each unit direction.

    dirs has shape (..., 3). Returns (depth (...,), albedo (..., 3)).
    """
    spec.validate()
    origin = np.asarray(spec.camera, dtype=np.float64)
    shape = dirs.shape[:-1]
    depth = np.full(shape, np.inf)
    albedo = np.zeros(shape + (3,))

    # Room faces seen from inside: (axis, bound, color).
    faces = [
        (0, spec.size[0], spec.wall_colors[0]),
        (0, 0.0, spec.wall_colors[1]),
        (1, spec.size[1], spec.wall_colors[2]),
        (1, 0.0, spec.wall_colors[3]),
        (2, spec.size[2], spec.ceiling_color),
        (2, 0.0, spec.floor_color),
    ]
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, bound, color in faces:
            d = dirs[..., axis]
            toward = d > 0 if bound > origin[axis] else d < 0
            t = np.where(toward, (bound - origin[axis]) / d, np.inf)
            closer = t < depth
            depth = np.where(closer, t, depth)
            albedo = np.where(closer[..., None], np.asarray(color), albedo)

        for box in spec.furniture:
            lo = (np.asarray(box.min_corner) - origin) / dirs
            hi = (np.asarray(box.max_corner) - origin) / dirs
            t_near = np.minimum(lo, hi).max(axis=-1)
            t_far = np.maximum(lo, hi).min(axis=-1)
            hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < depth)
            depth = np.where(hit, t_near, depth)
            albedo = np.where(hit[..., None], np.asarray(box.color), albedo)
    return depth, albedo


def render_room(spec: RoomSpec, height: int, yaw_columns: int = 0) -> Panorama:
    """Render one equirectangular RGB-D panorama (W = 2*H) of the room.

    The albedo of the hit surface is attenuated by 1 / (1 + 0.1 * depth) and
    mapped from [0, 1] to the [-1, 1] rgb convention.
    """
    width = 2 * height
    dirs = unit_directions(height, width, yaw_columns)
    depth, albedo = cast_rays(spec, dirs)
    shade = 1.0 / (1.0 + 0.1 * depth)
    rgb = 2.0 * albedo * shade[..., None] - 1.0
    return Panorama(rgb.astype(np.float32), depth.astype(np.float32))


def random_room(seed: int) -> RoomSpec:
    """Draw a plausible furnished room; deterministic per seed."""
    rng = np.random.default_rng(seed)
    sx, sy = rng.uniform(3.0, 6.0, size=2)
    sz = rng.uniform(2.6, 3.4)
    cam = (
        sx * rng.uniform(0.35, 0.65),
        sy * rng.uniform(0.35, 0.65),
        rng.uniform(1.3, 1.7),
    )

    def color():
        return tuple(rng.uniform(0.15, 0.95, size=3).round(3))

    furniture = []
    for _ in range(int(rng.integers(1, 5))):
        for _attempt in range(20):
            size = (rng.uniform(0.4, 1.4), rng.uniform(0.4, 1.4), rng.uniform(0.3, 1.2))
            corner = (
                rng.uniform(0, sx - size[0]),
                rng.uniform(0, sy - size[1]),
                0.0,
            )
            box = Furniture(corner, size, color())
            inside = all(m < c < m + s for m, c, s in zip(box.min_corner, cam, box.size))
            if not inside:  # never swallow the camera
                furniture.append(box)
                break

    return RoomSpec(
        size=(sx, sy, sz),
        camera=cam,
        furniture=furniture,
        wall_colors=tuple(color() for _ in range(4)),
        floor_color=color(),
        ceiling_color=color(),
        seed=seed,
    )


def sparsify_depth(depth: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Zero out exactly round(fraction * H * W) uniformly chosen depth entries."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    depth = np.asarray(depth)
    k = _round_half_up(fraction * depth.size)
    out = depth.copy()
    if k:
        idx = np.random.default_rng(seed).choice(depth.size, size=k, replace=False)
        out.flat[idx] = 0.0
    return out


# --- 8/16-bit image codecs ----------------------------------------------

def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    """[-1, 1] float -> uint8; u8_to_rgb inverts to within 1/255 per channel."""
    return np.clip(np.floor((np.asarray(rgb) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def u8_to_rgb(u8: np.ndarray) -> np.ndarray:
    return (np.asarray(u8).astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def depth_to_u16(depth: np.ndarray) -> np.ndarray:
    """Meters -> millimeter uint16, clipped at 65.535 m."""
    mm = np.floor(np.asarray(depth) * 1000.0 + 0.5)
    return np.clip(mm, 0, MAX_DEPTH_MM).astype(np.uint16)


def u16_to_depth(u16: np.ndarray) -> np.ndarray:
    return (np.asarray(u16).astype(np.float32) / 1000.0).astype(np.float32)


def save_panorama(pano: Panorama, rgb_path, depth_path) -> None:
    Image.fromarray(rgb_to_u8(pano.rgb)).save(rgb_path)
    Image.fromarray(depth_to_u16(pano.depth)).save(depth_path)


def load_panorama(rgb_path, depth_path) -> Panorama:
    rgb = u8_to_rgb(np.array(Image.open(rgb_path).convert("RGB")))
    depth = u16_to_depth(np.array(Image.open(depth_path)).astype(np.uint16))
    return Panorama(rgb, depth)


# --- dataset directories ---------------------------------------------------

def assign_splits(n_items: int, ratios, seed: int) -> list[str]:
    """Disjoint, exhaustive train/val/test assignment with rounded ratio counts."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    n_train = _round_half_up(ratios[0] * n_items)
    n_val = _round_half_up(ratios[1] * n_items)
    n_test = n_items - n_train - n_val
    if n_test < 0:
        raise ValueError("rounded split counts exceed the item count")
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = np.random.default_rng(seed).permutation(n_items)
    out = [""] * n_items
    for slot, item in enumerate(order):
        out[item] = labels[slot]
    return out


def generate_dataset(out_dir, n_rooms: int, height: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Render n_rooms panoramas, write split directories and manifest.json."""
    if n_rooms <= 0:
        raise ValueError("n_rooms must be positive")
    out_dir = os.fspath(out_dir)
    splits = assign_splits(n_rooms, ratios, seed)
    rng = np.random.default_rng(seed)
    item_seeds = rng.integers(0, 2**31 - 1, size=n_rooms)
    items = []
    for split in SPLITS:
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
    for i in range(n_rooms):
        item_id = f"room{i:04d}"
        item_seed = int(item_seeds[i])
        pano = render_room(random_room(item_seed), height)
        base = os.path.join(out_dir, splits[i])
        save_panorama(pano, os.path.join(base, f"{item_id}_rgb.png"),
                      os.path.join(base, f"{item_id}_depth.png"))
        items.append({"id": item_id, "split": splits[i], "seed": item_seed})
    manifest = {"height": height, "ratios": list(ratios), "seed": seed, "items": items}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(os.fspath(dataset_dir), "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json under {dataset_dir}")
    with open(path) as fh:
        manifest = json.load(fh)
    if "items" not in manifest or "height" not in manifest:
        raise ValueError(f"manifest at {path} is missing required keys")
    return manifest


def load_split(dataset_dir, split: str) -> list[tuple[str, Panorama]]:
    """All (id, panorama) pairs of one split, in manifest order."""
    manifest = load_manifest(dataset_dir)
    out = []
    for item in manifest["items"]:
        if item["split"] != split:
            continue
        base = os.path.join(os.fspath(dataset_dir), split)
        pano = load_panorama(os.path.join(base, f"{item['id']}_rgb.png"),
                             os.path.join(base, f"{item['id']}_depth.png"))
        out.append((item["id"], pano))
    return out
