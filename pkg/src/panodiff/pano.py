"""Equirectangular panorama grids, circular shifts, and view-mask generators.

Conventions used throughout the package:
  * panoramas are H x W with W == 2*H; columns are azimuth, rows elevation,
    and the image is periodic along the width axis,
  * masks are uint8 grids with 1 = visible, 0 = missing,
  * the latent grid of the autoencoders is H/4 x W/4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

# Spatial reduction factor of the autoencoders; panorama heights must divide by it.
DOWNSAMPLE_FACTOR = 4

MASK_KINDS = ("nfov", "camera", "layout", "box")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Panorama:
    """One equirectangular RGB-D frame.

    rgb:   (H, W, 3) float32 in [-1, 1]
    depth: (H, W) float32 meters, finite and >= 0
    """

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float32)
        depth = np.asarray(self.depth, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {rgb.shape}")
        h, w = rgb.shape[:2]
        if w != 2 * h:
            raise ValueError(f"equirectangular frames need W == 2*H, got {h}x{w}")
        if h % DOWNSAMPLE_FACTOR:
            raise ValueError(f"H must divide by {DOWNSAMPLE_FACTOR}, got {h}")
        if depth.shape != (h, w):
            raise ValueError(f"depth shape {depth.shape} does not match rgb {h}x{w}")
        if np.abs(rgb).max(initial=0.0) > 1.0 + 1e-5:
            raise ValueError("rgb values must lie in [-1, 1]")
        if not np.isfinite(depth).all() or depth.min(initial=0.0) < 0:
            raise ValueError("depth values must be finite and >= 0")
        self.rgb = np.clip(rgb, -1.0, 1.0)
        self.depth = depth

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


def circular_shift(grid: np.ndarray, columns: int) -> np.ndarray:
    """Rotate a grid horizontally: output column j holds input column (j - columns) mod W.

    Works on (H, W) and (H, W, C) arrays; rows are untouched. Any integer
    shift is accepted and reduced modulo the width.
    """
    grid = np.asarray(grid)
    if grid.ndim < 2:
        raise ValueError("circular_shift expects at least a 2-d grid")
    return np.roll(grid, int(columns), axis=1)


def degrees_to_columns(angle_deg: float, width: int) -> int:
    """Convert a yaw angle to a column shift, rounding half up, reduced mod width."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    return _round_half_up(width * angle_deg / 360.0) % width


@dataclass
class MaskSpec:
    """Parameters for one mask family; generation is deterministic per seed.

    kind selects the family:
      nfov   -- a single visible camera-view rectangle (wraps across the seam),
      camera -- the union of n_views such rectangles at random centers,
      layout -- only a ceiling band and a floor band are visible,
      box    -- fully visible minus n_boxes masked rectangles.

    The field-of-view parameters are exposed rather than fixed: nfov/camera
    rectangles span fov_h_deg of 360 horizontally and fov_v_deg of 180
    vertically. nfov centers default to a seeded random position unless
    center_col / center_row are given.
    """

    kind: str
    seed: int = 0
    # nfov / camera
    fov_h_deg: float = 90.0
    fov_v_deg: float = 90.0
    center_col: int | None = None
    center_row: int | None = None
    n_views: int = 4
    # layout
    ceiling_frac: float = 0.25
    floor_frac: float = 0.25
    # box
    n_boxes: int = 4
    box_frac_range: tuple[float, float] = (0.1, 0.3)

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}, expected one of {MASK_KINDS}")
        if self.fov_h_deg <= 0 or self.fov_v_deg <= 0:
            raise ValueError("fields of view must be positive")
        if not (0 <= self.ceiling_frac <= 1 and 0 <= self.floor_frac <= 1):
            raise ValueError("layout band fractions must be in [0, 1]")
        if self.n_views < 0 or self.n_boxes < 0:
            raise ValueError("view/box counts must be >= 0")
        lo, hi = self.box_frac_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("box_frac_range must satisfy 0 < lo <= hi <= 1")


def _paint_view_rect(grid, fov_h_deg, fov_v_deg, center_col, center_row):
    """Mark one view rectangle visible, wrapping horizontally, clamped vertically."""
    height, width = grid.shape
    span_w = _round_half_up(width * fov_h_deg / 360.0)
    span_h = _round_half_up(height * fov_v_deg / 180.0)
    if span_w >= width:
        cols = np.arange(width)
    else:
        cols = (center_col - span_w // 2 + np.arange(span_w)) % width
    if span_h >= height:
        rows = np.arange(height)
    else:
        r0 = center_row - span_h // 2
        rows = np.arange(max(r0, 0), min(r0 + span_h, height))
    if rows.size and cols.size:
        grid[np.ix_(rows, cols)] = 1


def gen_mask(spec: MaskSpec, height: int, width: int) -> np.ndarray:
    """Generate a binary visibility mask (uint8, 1 = visible) for the given grid.

    Deterministic for a fixed spec (including its seed). A horizontal field of
    view >= 360 degrees yields an all-visible mask; camera specs with zero
    views yield an all-masked one.
    """
    if height <= 0 or width <= 0:
        raise ValueError("mask dimensions must be positive")
    rng = np.random.default_rng(spec.seed)
    grid = np.zeros((height, width), dtype=np.uint8)

    if spec.kind == "nfov":
        col = spec.center_col if spec.center_col is not None else int(rng.integers(width))
        row = spec.center_row if spec.center_row is not None else height // 2
        _paint_view_rect(grid, spec.fov_h_deg, spec.fov_v_deg, col, row)
    elif spec.kind == "camera":
        for _ in range(spec.n_views):
            col = int(rng.integers(width))
            row = int(rng.integers(height))
            _paint_view_rect(grid, spec.fov_h_deg, spec.fov_v_deg, col, row)
    elif spec.kind == "layout":
        n_top = _round_half_up(spec.ceiling_frac * height)
        n_bot = _round_half_up(spec.floor_frac * height)
        grid[:n_top] = 1
        if n_bot:
            grid[height - n_bot:] = 1
    elif spec.kind == "box":
        grid[:] = 1
        lo, hi = spec.box_frac_range
        for _ in range(spec.n_boxes):
            bh = max(1, _round_half_up(rng.uniform(lo, hi) * height))
            bw = max(1, _round_half_up(rng.uniform(lo, hi) * width))
            r0 = int(rng.integers(max(height - bh, 0) + 1))
            c0 = int(rng.integers(width))
            cols = (c0 + np.arange(bw)) % width
            grid[np.ix_(np.arange(r0, min(r0 + bh, height)), cols)] = 0
    return grid


def mask_coverage(mask: np.ndarray) -> float:
    """Fraction of visible (non-zero) entries."""
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask)) / mask.size


def downsample_mask(mask: np.ndarray, factor: int, policy: str = "all-visible") -> np.ndarray:
    """Reduce a pixel mask to latent resolution, one cell per factor x factor block.

    all-visible (default): a cell is visible only when every covered pixel is,
    so no masked pixel can leak through the latent visible set.
    any-visible: a cell is visible when any covered pixel is.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    if factor <= 0 or h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by factor {factor}")
    blocks = (mask != 0).reshape(h // factor, factor, w // factor, factor)
    if policy == "all-visible":
        out = blocks.all(axis=(1, 3))
    elif policy == "any-visible":
        out = blocks.any(axis=(1, 3))
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return out.astype(np.uint8)


def save_mask_png(mask: np.ndarray, path) -> None:
    """Write a mask as 8-bit single-channel PNG (0 = masked, 255 = visible)."""
    arr = np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)
