"""Deterministic 2x panorama upscaler (final enhancement stage).

Interpolation wraps modulo the width, so the seam upsamples exactly like any
interior column pair, and clamps row indices at the poles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pano import Panorama

_KINDS = ("bilinear", "bicubic")


@dataclass
class UpscaleConfig:
    factor: int = 2
    kind: str = "bilinear"

    def __post_init__(self):
        if self.factor != 2:
            raise ValueError("only factor 2 is supported")
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")


def _catmull_rom(f: float) -> np.ndarray:
    """Weights on the four samples around fraction f (at offsets -1, 0, 1, 2)."""
    return np.array([
        0.5 * (-f + 2 * f**2 - f**3),
        0.5 * (2 - 5 * f**2 + 3 * f**3),
        0.5 * (f + 4 * f**2 - 3 * f**3),
        0.5 * (-(f**2) + f**3),
    ])


def _phase_taps(kind: str):
    """(offsets, weights) per output phase.

    Output index 2j samples source coordinate j - 0.25 and index 2j+1 samples
    j + 0.25, so phase 0 of column 0 reads source columns {-1, 0} (bilinear),
    which wrap to {W-1, 0}.
    """
    if kind == "bilinear":
        return [(np.array([-1, 0]), np.array([0.25, 0.75])),
                (np.array([0, 1]), np.array([0.75, 0.25]))]
    # bicubic: x = j - 0.25 has floor j-1 and fraction 0.75; x = j + 0.25
    # has floor j and fraction 0.25
    return [(np.array([-2, -1, 0, 1]), _catmull_rom(0.75)),
            (np.array([-1, 0, 1, 2]), _catmull_rom(0.25))]


def _axis_up2(arr: np.ndarray, kind: str, axis: int, wrap: bool) -> np.ndarray:
    """Double one axis; index lookups wrap (width) or clamp (height)."""
    n = arr.shape[axis]
    base = np.arange(n)

    def gather(offsets, weights):
        idx = base[:, None] + offsets[None, :]
        idx = idx % n if wrap else np.clip(idx, 0, n - 1)
        taken = np.take(arr, idx.reshape(-1), axis=axis)
        shape = list(arr.shape)
        shape[axis:axis + 1] = [n, len(offsets)]
        taken = taken.reshape(shape)
        w = weights.reshape([1] * axis + [1, len(offsets)] + [1] * (arr.ndim - axis - 1))
        return (taken * w).sum(axis=axis + 1)

    phases = [gather(offs, w) for offs, w in _phase_taps(kind)]
    out = np.stack(phases, axis=axis + 1)
    shape = list(arr.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def upscale2x(arr: np.ndarray, kind: str = "bilinear", clip: tuple | None = None) -> np.ndarray:
    """Upscale (H, W) or (H, W, C) by 2 in both axes, seam-aware horizontally."""
    if kind not in _KINDS:
        raise ValueError(f"kind must be one of {_KINDS}")
    arr = np.asarray(arr, dtype=np.float64)
    out = _axis_up2(arr, kind, axis=1, wrap=True)   # width first: wraps mod W
    out = _axis_up2(out, kind, axis=0, wrap=False)  # rows clamp at the poles
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def upscale(pano: Panorama, kind: str = "bilinear") -> Panorama:
    """Upscale a panorama to 2H x 2W; rgb clamped to [-1, 1], depth to >= 0."""
    rgb = upscale2x(pano.rgb, kind, clip=(-1.0, 1.0)).astype(np.float32)
    depth = upscale2x(pano.depth, kind, clip=(0.0, np.inf)).astype(np.float32)
    return Panorama(rgb, depth)
