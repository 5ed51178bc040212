"""VQ autoencoders for RGB and depth panoramas.

Every convolution pads circularly along the width axis and with zeros
vertically, so encoding/decoding commutes exactly with horizontal rotations
(pixel shifts that are multiples of the factor-4 downsampling map to whole
latent-column shifts). Depth is normalized to [-1, 1] against a fixed d_max
before encoding. Training uses L1 reconstruction plus the usual codebook and
commitment terms; no adversarial or perceptual losses at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint
from .pano import DOWNSAMPLE_FACTOR, Panorama

LATENT_KINDS = {"rgb3": 3, "depth1": 1, "rgbd4": 4}


@dataclass
class LatentGrid:
    """An (h, w, c) latent tensor with its channel semantics.

    kind rgb3 / depth1 are single-modality latents; rgbd4 is their channel
    concatenation (0-2 rgb, 3 depth).
    """

    data: np.ndarray
    kind: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.kind not in LATENT_KINDS:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        if self.data.ndim != 3 or self.data.shape[2] != LATENT_KINDS[self.kind]:
            raise ValueError(f"{self.kind} latent must be (h, w, {LATENT_KINDS[self.kind]}), "
                             f"got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape


def depth_norm(depth, d_max: float):
    """Map meters to [-1, 1]: clip(depth, 0, d_max) * 2/d_max - 1."""
    if d_max <= 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    return np.clip(np.asarray(depth, dtype=np.float32), 0.0, d_max) * (2.0 / d_max) - 1.0


def depth_denorm(x, d_max: float):
    if d_max <= 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    return (np.clip(np.asarray(x, dtype=np.float32), -1.0, 1.0) + 1.0) * (d_max / 2.0)


class PanoConv2d(nn.Module):
    """Conv2d padded circularly along width and with zeros along height.

    padding_mode="zeros" switches the width axis to zero padding as well,
    for models that should treat the frame as having hard boundaries.
    """

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, padding_mode="circular"):
        super().__init__()
        if padding_mode not in ("circular", "zeros"):
            raise ValueError(f"unsupported padding_mode {padding_mode!r}")
        self.pad = kernel_size // 2
        self.padding_mode = padding_mode
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=0)

    def forward(self, x):
        if self.pad:
            if self.padding_mode == "circular":
                x = F.pad(x, (self.pad, self.pad, 0, 0), mode="circular")
                x = F.pad(x, (0, 0, self.pad, self.pad))
            else:
                x = F.pad(x, (self.pad, self.pad, self.pad, self.pad))
        return self.conv(x)


class VectorQuantizer(nn.Module):
    """Nearest-neighbor codebook with straight-through gradients.

    Ties in the nearest-neighbor search resolve to the lowest codebook index.
    """

    def __init__(self, codebook_size: int, dim: int):
        super().__init__()
        self.codebook = nn.Parameter(torch.randn(codebook_size, dim) * 0.5)

    def lookup(self, z):
        """z: (B, C, H, W) -> (z_q, indices (B, H, W))."""
        b, c, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, c)
        dist = (flat.pow(2).sum(1, keepdim=True)
                - 2 * flat @ self.codebook.t()
                + self.codebook.pow(2).sum(1)[None, :])
        idx = torch.argmin(dist, dim=1)
        z_q = self.codebook[idx].reshape(b, h, w, c).permute(0, 3, 1, 2)
        return z_q, idx.reshape(b, h, w)

    def forward(self, z):
        z_q, idx = self.lookup(z)
        codebook_loss = F.mse_loss(z_q, z.detach())
        commitment_loss = F.mse_loss(z_q.detach(), z)
        z_q = z + (z_q - z).detach()  # straight-through
        return z_q, idx, codebook_loss, commitment_loss


def quantize(latent, codebook):
    """Replace each latent vector by its nearest codebook entry (Euclidean).

    latent: LatentGrid or (h, w, c) array; codebook: (K, c) array.
    Returns (quantized (h, w, c), indices (h, w), {"codebook", "commitment"}).
    """
    data = latent.data if isinstance(latent, LatentGrid) else np.asarray(latent, dtype=np.float32)
    book = np.asarray(codebook, dtype=np.float32)
    if book.ndim != 2 or book.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (K, c) array")
    if data.shape[-1] != book.shape[1]:
        raise ValueError(f"latent channels {data.shape[-1]} != codebook dim {book.shape[1]}")
    with torch.no_grad():
        z = torch.from_numpy(data).permute(2, 0, 1)[None]
        vq = VectorQuantizer(*book.shape)
        vq.codebook.copy_(torch.from_numpy(book))
        z_q, idx = vq.lookup(z)
    z_q = z_q[0].permute(1, 2, 0).numpy()
    diff = z_q - data
    losses = {
        "codebook": float(np.mean(diff**2)),
        "commitment": float(np.mean(diff**2)),
    }
    return z_q, idx[0].numpy(), losses


class Encoder(nn.Module):
    def __init__(self, in_ch, latent_ch, width):
        super().__init__()
        self.net = nn.Sequential(
            PanoConv2d(in_ch, width), nn.SiLU(),
            PanoConv2d(width, width, stride=2), nn.SiLU(),
            PanoConv2d(width, width), nn.SiLU(),
            PanoConv2d(width, width, stride=2), nn.SiLU(),
            PanoConv2d(width, width), nn.SiLU(),
            PanoConv2d(width, latent_ch),
        )

    def forward(self, x):
        # tanh keeps latents bounded, matching the unit-scale diffusion prior
        return torch.tanh(self.net(x))


class Decoder(nn.Module):
    def __init__(self, latent_ch, out_ch, width):
        super().__init__()
        self.head = nn.Sequential(PanoConv2d(latent_ch, width), nn.SiLU(), PanoConv2d(width, width), nn.SiLU())
        self.up1 = nn.Sequential(PanoConv2d(width, width), nn.SiLU(), PanoConv2d(width, width), nn.SiLU())
        self.up2 = nn.Sequential(PanoConv2d(width, width), nn.SiLU(), PanoConv2d(width, width), nn.SiLU())
        self.out = PanoConv2d(width, out_ch)

    def forward(self, z):
        h = self.head(z)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(h)


class Autoencoder(nn.Module):
    """Encoder + codebook + decoder for one modality (rgb or depth)."""

    def __init__(self, channels: int, width: int = 48, codebook_size: int = 256):
        super().__init__()
        self.channels = channels
        self.width = width
        self.codebook_size = codebook_size
        self.encoder = Encoder(channels, channels, width)
        self.decoder = Decoder(channels, channels, width)
        self.quantizer = VectorQuantizer(codebook_size, channels)

    def encode(self, x):
        """Continuous (pre-quantization) latent."""
        return self.encoder(x)

    def decode(self, z):
        """Quantize through the codebook, then decode."""
        z_q, _ = self.quantizer.lookup(z)
        return self.decoder(z_q)

    def config(self):
        return {"channels": self.channels, "width": self.width, "codebook_size": self.codebook_size}


@dataclass
class AutoencoderBundle:
    """The frozen pair of modality autoencoders used by the diffusion stage."""

    rgb: Autoencoder
    depth: Autoencoder
    d_max: float = 10.0
    factor: int = DOWNSAMPLE_FACTOR


def _to_torch(image, channels):
    arr = np.asarray(image, dtype=np.float32)
    if channels == 1 and arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ValueError(f"expected (H, W, {channels}) input, got {arr.shape}")
    if arr.shape[0] % DOWNSAMPLE_FACTOR or arr.shape[1] % DOWNSAMPLE_FACTOR:
        raise ValueError(f"spatial dims {arr.shape[:2]} must divide by {DOWNSAMPLE_FACTOR}")
    return torch.from_numpy(arr).permute(2, 0, 1)[None]


def encode(bundle: AutoencoderBundle, image, modality: str) -> LatentGrid:
    """Encode an rgb image ([-1,1], (H,W,3)) or a depth map (meters, (H,W)).

    Depth is normalized against bundle.d_max before encoding. The result is
    the continuous latent at (H/4, W/4).
    """
    if modality == "rgb":
        x = _to_torch(image, 3)
        model, kind = bundle.rgb, "rgb3"
    elif modality == "depth":
        x = _to_torch(depth_norm(image, bundle.d_max), 1)
        model, kind = bundle.depth, "depth1"
    else:
        raise ValueError(f"unknown modality {modality!r}")
    model.eval()
    with torch.no_grad():
        z = model.encode(x)
    return LatentGrid(z[0].permute(1, 2, 0).numpy(), kind)


def encode_normalized(bundle: AutoencoderBundle, normalized, modality: str) -> LatentGrid:
    """Encode data already living in the [-1, 1] model range (no depth_norm)."""
    model = bundle.rgb if modality == "rgb" else bundle.depth
    x = _to_torch(normalized, model.channels)
    model.eval()
    with torch.no_grad():
        z = model.encode(x)
    return LatentGrid(z[0].permute(1, 2, 0).numpy(), "rgb3" if modality == "rgb" else "depth1")


def decode(bundle: AutoencoderBundle, latent, modality: str):
    """Decode a latent; rgb -> (H,W,3) clamped to [-1,1], depth -> (H,W) meters."""
    data = latent.data if isinstance(latent, LatentGrid) else np.asarray(latent, dtype=np.float32)
    if modality == "rgb":
        model, channels = bundle.rgb, 3
    elif modality == "depth":
        model, channels = bundle.depth, 1
    else:
        raise ValueError(f"unknown modality {modality!r}")
    if data.ndim != 3 or data.shape[2] != channels:
        raise ValueError(f"expected (h, w, {channels}) latent, got {data.shape}")
    model.eval()
    with torch.no_grad():
        z = torch.from_numpy(data).permute(2, 0, 1)[None]
        out = model.decode(z).clamp(-1.0, 1.0)
    out = out[0].permute(1, 2, 0).numpy()
    if modality == "depth":
        return depth_denorm(out[..., 0], bundle.d_max)
    return out


def encode_rgbd(bundle: AutoencoderBundle, pano: Panorama) -> LatentGrid:
    z_rgb = encode(bundle, pano.rgb, "rgb")
    z_depth = encode(bundle, pano.depth, "depth")
    return LatentGrid(np.concatenate([z_rgb.data, z_depth.data], axis=2), "rgbd4")


def decode_rgbd(bundle: AutoencoderBundle, latent) -> tuple[np.ndarray, np.ndarray]:
    data = latent.data if isinstance(latent, LatentGrid) else np.asarray(latent)
    rgb = decode(bundle, data[:, :, :3], "rgb")
    depth = decode(bundle, data[:, :, 3:4], "depth")
    return rgb, depth


@dataclass
class VaeTrainConfig:
    width: int = 48
    codebook_size: int = 256
    epochs: int = 120
    batch_size: int = 8
    lr: float = 2e-3
    commitment_weight: float = 0.25
    codebook_revive_every: int = 50  # steps between dead-code reassignments


def _dataset_tensor(panos, modality, d_max):
    if not panos:
        raise ValueError("training dataset is empty")
    if modality == "rgb":
        arrs = [p.rgb for p in panos]
    else:
        arrs = [depth_norm(p.depth, d_max)[..., None] for p in panos]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


def train_autoencoder(panos, modality: str, cfg: VaeTrainConfig, seed: int = 0,
                      d_max: float = 10.0, log=None, warm_start: Autoencoder | None = None):
    """Train one modality autoencoder; returns (model, per-epoch loss list).

    Deterministic under a fixed seed up to platform float variation. The
    codebook is initialized from encoder outputs of the first batch, and
    codes unused over a revive window are reassigned to live latents, which
    keeps the small codebook from collapsing.
    """
    if modality not in ("rgb", "depth"):
        raise ValueError(f"unknown modality {modality!r}")
    torch.manual_seed(seed)
    data = _dataset_tensor(panos, modality, d_max)
    n = data.shape[0]
    channels = data.shape[1]
    if warm_start is not None:
        model = warm_start
        model.train()
    else:
        model = Autoencoder(channels, width=cfg.width, codebook_size=cfg.codebook_size)
        with torch.no_grad():  # data-dependent codebook init
            z0 = model.encode(data[: min(n, cfg.batch_size)])
            flat = z0.permute(0, 2, 3, 1).reshape(-1, channels)
            pick = torch.randint(0, flat.shape[0], (cfg.codebook_size,))
            model.quantizer.codebook.copy_(flat[pick] + 0.01 * torch.randn(cfg.codebook_size, channels))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    usage = torch.zeros(cfg.codebook_size, dtype=torch.long)
    history = []
    step = 0
    steps_per_epoch = max(1, n // cfg.batch_size)
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = torch.randint(0, n, (cfg.batch_size,))
            x = data[idx]
            z = model.encode(x)
            z_q, code_idx, codebook_loss, commitment_loss = model.quantizer(z)
            x_hat = model.decoder(z_q)
            loss = (F.l1_loss(x_hat, x) + codebook_loss
                    + cfg.commitment_weight * commitment_loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            usage += torch.bincount(code_idx.reshape(-1), minlength=cfg.codebook_size)
            step += 1
            if step % cfg.codebook_revive_every == 0:
                dead = (usage == 0).nonzero(as_tuple=True)[0]
                if len(dead):
                    with torch.no_grad():
                        flat = z.permute(0, 2, 3, 1).reshape(-1, channels)
                        pick = torch.randint(0, flat.shape[0], (len(dead),))
                        model.quantizer.codebook[dead] = flat[pick]
                usage.zero_()
            epoch_loss += loss.item()
        history.append(epoch_loss / steps_per_epoch)
        if log is not None:
            log(epoch, history[-1])
    model.eval()
    return model, history


def save_autoencoder(model: Autoencoder, path, seed: int, extra: dict | None = None) -> None:
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, tensors, model.config(), seed, extra=extra)


def load_autoencoder(path) -> Autoencoder:
    tensors, manifest = load_checkpoint(path)
    model = Autoencoder(**manifest["config"])
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    model.eval()
    return model
