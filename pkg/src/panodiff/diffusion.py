"""Latent-space DDPM: noise schedule, forward process, reverse steps,
noise-prediction network, training loop, and unconditional sampling.

The network trains at T steps; inference walks a shorter strictly
decreasing subsequence (StepMap) using the effective one-step betas of
that subsequence, so the closed-form noise level is exact at every
visited step. The network itself always receives the original training
timestep for its time embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule over T steps; betas[t-1] is the step-t beta."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-d array")
        if betas.min() <= 0 or betas.max() >= 1:
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return self.betas.size

    def _check_t(self, t: int, low: int = 1):
        if not low <= t <= self.T:
            raise ValueError(f"t={t} outside [{low}, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas; alpha_bar(0) is defined as 1."""
        self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        self._check_t(t)
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def _coeff(values, like):
    """Per-sample scalars shaped for broadcasting against a (B, C, H, W) tensor."""
    if isinstance(like, torch.Tensor):
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        return c.reshape(-1, *([1] * (like.ndim - 1))) if c.ndim else c
    return np.asarray(values, dtype=np.float64)


def q_sample(z0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward sample: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be a scalar in [0, T] (t=0 returns z0 exactly) or a sequence of
    per-sample steps for a batched z0. Works on numpy arrays and torch
    tensors alike.
    """
    if np.ndim(t) == 0:
        abar = schedule.alpha_bar(int(t))
        return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps
    abars = [schedule.alpha_bar(int(ti)) for ti in t]
    root = _coeff([math.sqrt(a) for a in abars], z0)
    residual = _coeff([math.sqrt(1.0 - a) for a in abars], z0)
    return root * z0 + residual * eps


def ddpm_step(z_t, eps_hat, t: int, schedule: NoiseSchedule, noise=None):
    """One reverse step t -> t-1 under the given schedule.

    mean = (z_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t), plus
    sigma_t * noise with sigma_t^2 = beta_t (1-abar_{t-1}) / (1-abar_t).
    At t=1 the noise term is always dropped.
    """
    t = int(t)
    schedule._check_t(t)
    beta = schedule.beta(t)
    abar = schedule.alpha_bar(t)
    mean = (z_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(schedule.alpha(t))
    if t == 1 or noise is None:
        return mean
    return mean + math.sqrt(schedule.posterior_variance(t)) * noise


@dataclass(frozen=True)
class StepMap:
    """Strictly increasing subsequence of training steps used at inference.

    ts[0] is the final (smallest) step and ts[-1] the first (largest); both
    endpoints are included, so a full map is ts == (1, ..., T).
    """

    ts: tuple[int, ...]

    def __post_init__(self):
        ts = tuple(int(t) for t in self.ts)
        if not ts or ts[0] < 1:
            raise ValueError("step map needs at least one step >= 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("step map must be strictly increasing")
        object.__setattr__(self, "ts", ts)

    @property
    def S(self) -> int:
        return len(self.ts)

    @classmethod
    def evenly(cls, T: int, S: int) -> "StepMap":
        """Evenly strided subsequence from 1 to T inclusive."""
        if not 1 <= S <= T:
            raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
        ts = np.unique(np.round(np.linspace(1, T, S)).astype(int))
        return cls(tuple(ts))

    def respaced(self, schedule: NoiseSchedule) -> NoiseSchedule:
        """Effective one-step schedule over the subsequence.

        beta_i = 1 - abar(ts[i]) / abar(ts[i-1]) telescopes so that the
        respaced alpha_bar at position i equals the original at ts[i].
        """
        if self.ts[-1] > schedule.T:
            raise ValueError(f"step map reaches {self.ts[-1]} > T={schedule.T}")
        abars = np.array([schedule.alpha_bar(t) for t in self.ts])
        prev = np.concatenate([[1.0], abars[:-1]])
        return NoiseSchedule(1.0 - abars / prev)

    def pairs(self):
        """(t, t_prev) pairs from the largest step down to (ts[0], 0)."""
        ts = self.ts
        return [(ts[i], ts[i - 1] if i else 0) for i in range(len(ts) - 1, -1, -1)]


# --- noise-prediction network ----------------------------------------------

def timestep_embedding(t, dim: int):
    """Standard sinusoidal embedding of integer timesteps; t: (B,) tensor."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels, time_dim, padding_mode):
        super().__init__()
        from .autoencoder import PanoConv2d

        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = PanoConv2d(channels, channels, padding_mode=padding_mode)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = PanoConv2d(channels, channels, padding_mode=padding_mode)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


@dataclass
class DenoiserConfig:
    in_channels: int = 4
    channels: int = 64
    n_blocks: int = 6
    time_dim: int = 128
    padding_mode: str = "circular"  # "zeros" treats the seam as a hard border


class Denoiser(nn.Module):
    """Noise predictor over latent grids, with sinusoidal time conditioning.

    The body runs at constant spatial resolution (the latent grid is already
    small), with residual blocks and a long skip from the input projection.
    With circular padding it commutes exactly with horizontal latent shifts.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        from .autoencoder import PanoConv2d

        self.cfg = cfg
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim),
        )
        self.conv_in = PanoConv2d(cfg.in_channels, cfg.channels, padding_mode=cfg.padding_mode)
        self.blocks = nn.ModuleList(
            ResBlock(cfg.channels, cfg.time_dim, cfg.padding_mode) for _ in range(cfg.n_blocks)
        )
        self.norm_out = nn.GroupNorm(8, cfg.channels)
        self.conv_out = PanoConv2d(2 * cfg.channels, cfg.in_channels, padding_mode=cfg.padding_mode)

    def forward(self, z, t):
        if not isinstance(t, torch.Tensor):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        h = self.conv_in(z)
        skip = h
        for block in self.blocks:
            h = block(h, temb)
        h = F.silu(self.norm_out(h))
        return self.conv_out(torch.cat([h, skip], dim=1))

    def config(self):
        return dict(self.cfg.__dict__)


# --- training ----------------------------------------------------------------

@dataclass
class LdmTrainConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    channels: int = 64
    n_blocks: int = 6
    time_dim: int = 128
    padding_mode: str = "circular"
    variant: str = "rgbd"           # "rgb" trains a 3-channel twin (no depth latent)
    augment_rotation: bool = True   # per-sample random circular latent shift
    depth_sparsity_prob: float = 0.0
    depth_sparsity_fraction: float = 0.5


def encode_training_latents(panos, bundle, sparsity_fraction=None, seed: int = 0) -> np.ndarray:
    """Encode panoramas to (N, h, w, 4) rgbd latents with the frozen bundle.

    When sparsity_fraction is given, each item's depth map is sparsified
    (per-item derived seed) before encoding.
    """
    from .autoencoder import encode_rgbd
    from .synthdata import sparsify_depth
    from .pano import Panorama

    out = []
    for i, pano in enumerate(panos):
        if sparsity_fraction is not None:
            depth = sparsify_depth(pano.depth, sparsity_fraction, seed + i)
            pano = Panorama(pano.rgb, depth)
        out.append(encode_rgbd(bundle, pano).data)
    return np.stack(out)


def train_ldm(latents: np.ndarray, cfg: LdmTrainConfig, seed: int = 0,
              sparse_latents: np.ndarray | None = None, log_path=None,
              warm_start: "Denoiser | None" = None, log_step_base: int = 0):
    """Train the noise predictor on pre-encoded latents.

    latents: (N, h, w, c). When sparse_latents is given, each sample uses the
    sparsified variant with probability cfg.depth_sparsity_prob. Returns
    (denoiser, schedule, per-step loss list); optionally appends a JSON line
    {"step", "loss"} per step to log_path. warm_start continues from an
    existing model (its architecture wins), with steps numbered from
    log_step_base in the log.
    """
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise ValueError("latents must be a non-empty (N, h, w, c) array")
    torch.manual_seed(seed)
    data = torch.from_numpy(latents).permute(0, 3, 1, 2).contiguous()
    sparse = None
    if sparse_latents is not None:
        sparse = torch.from_numpy(np.asarray(sparse_latents, dtype=np.float32)).permute(0, 3, 1, 2)
        if sparse.shape != data.shape:
            raise ValueError("sparse latents must match the dense latents' shape")

    n, c, _, w = data.shape
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    if warm_start is not None:
        model = warm_start
        model.train()
    else:
        model = Denoiser(DenoiserConfig(in_channels=c, channels=cfg.channels,
                                        n_blocks=cfg.n_blocks, time_dim=cfg.time_dim,
                                        padding_mode=cfg.padding_mode))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log_fh = open(log_path, "a") if log_path else None

    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,))
        z0 = data[idx].clone()
        if sparse is not None and cfg.depth_sparsity_prob > 0:
            swap = torch.rand(cfg.batch_size) < cfg.depth_sparsity_prob
            z0[swap] = sparse[idx[swap]]
        if cfg.augment_rotation:
            shifts = torch.randint(0, w, (cfg.batch_size,))
            for b in range(cfg.batch_size):
                z0[b] = torch.roll(z0[b], int(shifts[b]), dims=-1)
        t = torch.randint(1, cfg.T + 1, (cfg.batch_size,))
        eps = torch.randn_like(z0)
        z_t = q_sample(z0, t, eps, schedule)
        pred = model(z_t, t)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_fh:
            log_fh.write(json.dumps({"step": log_step_base + step, "loss": losses[-1]}) + "\n")
    if log_fh:
        log_fh.close()
    model.eval()
    return model, schedule, losses


# --- sampling ----------------------------------------------------------------

def sample_many(denoiser: Denoiser, schedule: NoiseSchedule, step_map: StepMap,
                shape: tuple[int, int, int], n: int, seed: int) -> np.ndarray:
    """n unconditional latent samples, batched; deterministic per seed.

    shape is (h, w, c); returns (n, h, w, c).
    """
    h, w, c = shape
    respaced = step_map.respaced(schedule)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(n, c, h, w, generator=gen)
    denoiser.eval()
    with torch.no_grad():
        for i, (t, _t_prev) in zip(range(step_map.S, 0, -1), step_map.pairs()):
            eps_hat = denoiser(z, torch.full((n,), t, dtype=torch.long))
            noise = torch.randn(z.shape, generator=gen) if i > 1 else None
            z = ddpm_step(z, eps_hat, i, respaced, noise)
    return z.permute(0, 2, 3, 1).numpy()


def sample_unconditional(denoiser: Denoiser, schedule: NoiseSchedule, step_map: StepMap,
                         shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """One unconditional latent sample of the given (h, w, c) shape."""
    return sample_many(denoiser, schedule, step_map, shape, 1, seed)[0]


def save_denoiser(model: Denoiser, path, seed: int, extra: dict | None = None) -> None:
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, tensors, model.config(), seed, extra=extra)


def load_denoiser(path) -> Denoiser:
    tensors, manifest = load_checkpoint(path)
    model = Denoiser(DenoiserConfig(**manifest["config"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model
