"""Masked latent sampling with optional per-step quarter-turn seam alignment.

Each reverse step builds the visible region by forward-noising the encoded
visible latent to the target step and the missing region by one reverse
denoising step, then blends the two with the latent mask. With alignment
enabled, latents, mask, and visible latent are rotated by 90 degrees before
every step and the accumulated rotation is undone before decoding.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .autoencoder import (AutoencoderBundle, LatentGrid, decode, depth_norm,
                          encode_normalized)
from .diffusion import Denoiser, NoiseSchedule, StepMap, ddpm_step, q_sample
from .errors import InvalidStateError
from .pano import DOWNSAMPLE_FACTOR, Panorama, downsample_mask
from .synthdata import save_panorama


@dataclass
class OutpaintRequest:
    """One outpainting job.

    rgb is (H, W, 3) in [-1, 1] with mask (H, W) marking visible pixels;
    content under masked pixels is ignored. depth (meters) is optional and
    carries its own visibility mask (all-visible when depth is given without
    one); with no depth the latent depth channel is treated as fully unknown.
    """

    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray | None = None
    depth_mask: np.ndarray | None = None
    n_samples: int = 1
    align: bool = True
    composite: bool = False
    seed: int = 0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.mask = (np.asarray(self.mask) != 0).astype(np.uint8)
        h, w = self.rgb.shape[:2]
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(f"rgb dims {h}x{w} must divide by {DOWNSAMPLE_FACTOR}")
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} does not match rgb {h}x{w}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
            if self.depth.shape != (h, w):
                raise ValueError("depth shape must match rgb")
            if self.depth_mask is None:
                self.depth_mask = np.ones((h, w), dtype=np.uint8)
            else:
                self.depth_mask = (np.asarray(self.depth_mask) != 0).astype(np.uint8)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class RotationLedger:
    """Bookkeeping of per-step latent rotations; the total must be undone."""

    latent_width: int
    shifts: list[int] = field(default_factory=list)

    def record(self, columns: int) -> None:
        self.shifts.append(int(columns))

    @property
    def cumulative(self) -> int:
        return sum(self.shifts) % self.latent_width

    def checksum(self) -> str:
        blob = json.dumps({"w": self.latent_width, "shifts": self.shifts}).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class ModelSet:
    """Everything outpainting needs: frozen autoencoders plus the denoiser."""

    bundle: AutoencoderBundle
    denoiser: Denoiser
    schedule: NoiseSchedule
    step_map: StepMap

    @classmethod
    def load(cls, checkpoint_root, d_max: float = 10.0, sample_steps: int = 200,
             T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "ModelSet":
        from .autoencoder import load_autoencoder
        from .diffusion import load_denoiser, make_schedule

        root = os.fspath(checkpoint_root)
        for stage in ("vae-rgb", "vae-depth", "ldm"):
            if not os.path.exists(os.path.join(root, stage, "manifest.json")):
                raise InvalidStateError(f"missing checkpoint for stage '{stage}' under {root}")
        bundle = AutoencoderBundle(
            rgb=load_autoencoder(os.path.join(root, "vae-rgb")),
            depth=load_autoencoder(os.path.join(root, "vae-depth")),
            d_max=d_max,
        )
        schedule = make_schedule(T, beta_start, beta_end)
        return cls(bundle, load_denoiser(os.path.join(root, "ldm")), schedule,
                   StepMap.evenly(T, sample_steps))


def prepare_latents(request: OutpaintRequest, bundle: AutoencoderBundle,
                    rng: torch.Generator | None = None):
    """Visible rgbd latent and its per-channel latent mask.

    The rgb channels encode the zero-filled masked image; the depth channel
    is standard normal noise when the request has no depth (and its latent
    mask is all zeros, i.e. fully unknown), otherwise the encoded masked
    depth with the downsampled depth mask. Returns two (h, w, 4) arrays.
    """
    masked_rgb = request.rgb * request.mask[:, :, None]
    z_rgb = encode_normalized(bundle, masked_rgb, "rgb").data
    h, w = z_rgb.shape[:2]
    m_rgb = downsample_mask(request.mask, bundle.factor, "all-visible")

    if request.depth is None:
        gen = rng if rng is not None else torch.Generator().manual_seed(request.seed)
        z_depth = torch.randn(h, w, 1, generator=gen).numpy()
        m_depth = np.zeros((h, w), dtype=np.uint8)
    else:
        norm = depth_norm(request.depth, bundle.d_max) * request.depth_mask
        z_depth = encode_normalized(bundle, norm[..., None], "depth").data
        m_depth = downsample_mask(request.depth_mask, bundle.factor, "all-visible")

    z0_visible = np.concatenate([z_rgb, z_depth], axis=2).astype(np.float32)
    latent_mask = np.concatenate([np.repeat(m_rgb[:, :, None], 3, axis=2),
                                  m_depth[:, :, None]], axis=2).astype(np.float32)
    return z0_visible, latent_mask


def outpaint_step(z_t, t: int, t_prev: int, z0_visible, latent_mask,
                  denoiser: Denoiser, schedule: NoiseSchedule, step_map: StepMap,
                  rng: torch.Generator | None = None, *,
                  noise_visible=None, noise_step=None):
    """One masked reverse step t -> t_prev over (B, 4, h, w) torch tensors.

    The visible branch is q_sample(z0_visible, t_prev) with fresh noise; the
    missing branch is the plain reverse step; the output blends them with the
    latent mask per channel. When rng is used, the visible noise is drawn
    first and the step noise second; tests may inject either explicitly.
    """
    pairs = step_map.pairs()
    try:
        i = step_map.S - pairs.index((int(t), int(t_prev)))
    except ValueError:
        raise ValueError(f"({t}, {t_prev}) is not a step pair of the map") from None
    if z_t.shape != z0_visible.shape or z_t.shape != latent_mask.shape:
        raise ValueError("z_t, z0_visible and latent_mask must share one shape")

    if noise_visible is None:
        noise_visible = torch.randn(z_t.shape, generator=rng)
    if noise_step is None and i > 1:
        noise_step = torch.randn(z_t.shape, generator=rng)

    eps_hat = denoiser(z_t, t)
    z_invisible = ddpm_step(z_t, eps_hat, i, step_map.respaced(schedule), noise_step)
    z_visible = q_sample(z0_visible, t_prev, noise_visible, schedule)
    return latent_mask * z_visible + (1.0 - latent_mask) * z_invisible


def align_rotate(z_t, latent_mask, z0_visible, ledger: RotationLedger):
    """Rotate all three tensors by a quarter turn (w/4 latent columns)."""
    w = z_t.shape[-1]
    if w % 4:
        raise ValueError(f"latent width {w} must divide by 4 for quarter turns")
    k = w // 4
    ledger.record(k)
    roll = lambda x: torch.roll(x, k, dims=-1)
    return roll(z_t), roll(latent_mask), roll(z0_visible), ledger


def outpaint(request: OutpaintRequest, models: ModelSet) -> list[Panorama]:
    """Run the full masked sampling loop; returns n_samples RGB-D panoramas.

    Each sample uses an independent derived rng stream, so results are
    deterministic per request seed and differ across samples.
    """
    bundle, denoiser = models.bundle, models.denoiser
    schedule, step_map = models.schedule, models.step_map
    child_seeds = np.random.SeedSequence(request.seed).generate_state(request.n_samples)

    results = []
    for k in range(request.n_samples):
        gen = torch.Generator().manual_seed(int(child_seeds[k]))
        z0v_np, mask_np = prepare_latents(request, bundle, gen)
        z0v = torch.from_numpy(z0v_np).permute(2, 0, 1)[None]
        lmask = torch.from_numpy(mask_np).permute(2, 0, 1)[None]
        h, w = z0v.shape[-2:]
        ledger = RotationLedger(w)
        z = torch.randn(1, z0v.shape[1], h, w, generator=gen)

        with torch.no_grad():
            for t, t_prev in step_map.pairs():
                if request.align:
                    z, lmask, z0v, ledger = align_rotate(z, lmask, z0v, ledger)
                z = outpaint_step(z, t, t_prev, z0v, lmask, denoiser, schedule,
                                  step_map, gen)
            z = torch.roll(z, -ledger.cumulative, dims=-1)

        latent = z[0].permute(1, 2, 0).numpy()
        rgb = decode(bundle, latent[:, :, :3], "rgb")
        depth = decode(bundle, latent[:, :, 3:4], "depth")
        if request.composite:
            vis = request.mask[:, :, None].astype(bool)
            rgb = np.where(vis, request.rgb, rgb)
            if request.depth is not None:
                depth = np.where(request.depth_mask.astype(bool), request.depth, depth)
        results.append(Panorama(rgb, np.maximum(depth, 0.0)))
    return results


def run_ledger(request: OutpaintRequest, models: ModelSet) -> RotationLedger:
    """The rotation ledger an outpaint run of this request produces."""
    w = request.rgb.shape[1] // models.bundle.factor
    ledger = RotationLedger(w)
    if request.align:
        for _ in range(models.step_map.S):
            ledger.record(w // 4)
    return ledger


def save_results(results: list[Panorama], out_dir, request_id: str,
                 request: OutpaintRequest, models: ModelSet) -> list[str]:
    """Write one rgb/depth PNG pair per sample plus a JSON sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for k, pano in enumerate(results):
        rgb_path = os.path.join(out_dir, f"{request_id}_sample{k}_rgb.png")
        depth_path = os.path.join(out_dir, f"{request_id}_sample{k}_depth.png")
        save_panorama(pano, rgb_path, depth_path)
        written += [rgb_path, depth_path]
    sidecar = {
        "id": request_id,
        "seed": request.seed,
        "align": request.align,
        "composite": request.composite,
        "n_samples": request.n_samples,
        "step_count": models.step_map.S,
        "ledger_checksum": run_ledger(request, models).checksum(),
    }
    sidecar_path = os.path.join(out_dir, f"{request_id}.json")
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    written.append(sidecar_path)
    return written
