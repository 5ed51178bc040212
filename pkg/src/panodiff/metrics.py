"""Evaluation suite: seam consistency, depth accuracy, and feature-space
distribution metrics (Frechet distance, density, coverage).

The feature extractor is a fixed, seeded random-projection conv net rather
than a pretrained classifier, so absolute Frechet values are only comparable
between sets produced with the same extractor id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from .errors import NumericalError


def psnr(a, b, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; peak=2 for the [-1, 1] convention."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def lrce(images) -> float:
    """Mean absolute difference between each image's first and last columns.

    images: iterable of (H, W, C) arrays on the 0..255 value scale; the
    per-image means (over rows and channels) are averaged over the set.
    """
    images = list(images)
    if not images:
        raise ValueError("lrce needs at least one image")
    vals = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        vals.append(float(np.abs(img[:, 0] - img[:, -1]).mean()))
    return float(np.mean(vals))


@dataclass
class DepthReport:
    rmse: float
    mae: float
    absrel: float
    delta125: float
    n_valid: int
    n_excluded: int = 0  # valid pixels with non-positive gt, skipped by ratios

    def as_dict(self):
        return {"rmse": self.rmse, "mae": self.mae, "absrel": self.absrel,
                "delta125": self.delta125, "n_valid": self.n_valid,
                "n_excluded": self.n_excluded}


def depth_metrics(pred, gt, valid=None) -> DepthReport:
    """RMSE / MAE / AbsREL / Delta1.25 over the valid pixels.

    Ratio metrics (absrel, delta125) skip valid pixels whose ground truth is
    not positive; the skip count is reported.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    valid = np.asarray(valid) != 0
    if not valid.any():
        raise ValueError("depth_metrics needs at least one valid pixel")
    p, g = pred[valid], gt[valid]
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    mae = float(np.mean(np.abs(p - g)))
    pos = g > 0
    n_excluded = int((~pos).sum())
    if pos.any():
        pp, gp = p[pos], g[pos]
        absrel = float(np.mean(np.abs(pp - gp) / gp))
        with np.errstate(divide="ignore"):
            ratio = np.maximum(pp / gp, gp / pp)
        delta125 = float(np.mean(ratio < 1.25))
    else:
        absrel, delta125 = float("nan"), float("nan")
    return DepthReport(rmse, mae, absrel, delta125, int(valid.sum()), n_excluded)


# --- feature extraction ------------------------------------------------------

@dataclass
class FeatureExtractor:
    """Fixed random conv features; deterministic per (seed, dim)."""

    seed: int = 0
    dim: int = 64
    n_filters: int = 24

    @property
    def extractor_id(self) -> str:
        return f"randconv-v1/seed{self.seed}/dim{self.dim}/f{self.n_filters}"

    def _weights(self):
        rng = np.random.default_rng(self.seed)
        w1 = rng.normal(0, 1, (self.n_filters, 3, 5, 5)) / math.sqrt(75)
        w2 = rng.normal(0, 1, (self.n_filters, self.n_filters, 5, 5)) / math.sqrt(25 * self.n_filters)
        proj = rng.normal(0, 1, (self.dim, self.n_filters * 4 * 8)) / math.sqrt(self.n_filters * 32)
        return (torch.from_numpy(w1).float(), torch.from_numpy(w2).float(),
                torch.from_numpy(proj).float())


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d)
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be (n, d)")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


def extract_features(images, extractor: FeatureExtractor) -> FeatureSet:
    """Map images (H, W, 3) on the 0..255 scale to d-dim feature rows.

    Two strided random conv stages with relu, average-pooled on a 4x8 grid,
    then a fixed random projection. All images in one set must share a size.
    """
    images = list(images)
    if not images:
        raise ValueError("extract_features needs at least one image")
    shape = np.asarray(images[0]).shape
    if any(np.asarray(im).shape != shape for im in images):
        raise ValueError("all images must share one size")
    w1, w2, proj = extractor._weights()
    rows = []
    with torch.no_grad():
        for im in images:  # one at a time so features never depend on the batch
            x = torch.from_numpy(np.asarray(im, dtype=np.float32) / 255.0)
            x = x.permute(2, 0, 1)[None]
            h = F.relu(F.conv2d(x, w1, stride=2, padding=2))
            h = F.relu(F.conv2d(h, w2, stride=2, padding=2))
            pooled = F.adaptive_avg_pool2d(h, (4, 8)).reshape(1, -1)
            rows.append((pooled @ proj.t()).numpy()[0])
    return FeatureSet(np.stack(rows).astype(np.float64), extractor.extractor_id)


# --- distribution metrics ------------------------------------------------------

def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; small negative eigenvalues clip to 0."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureSet, b: FeatureSet, shrinkage: float = 0.0) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    d^2 = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    computed with symmetric square roots. With fewer than d+1 rows per set the
    sample covariance is singular; pass shrinkage in (0, 1] to blend it with a
    scaled identity, or the call raises.
    """
    if a.extractor_id != b.extractor_id:
        raise ValueError(f"feature sets from different extractors: "
                         f"{a.extractor_id} vs {b.extractor_id}")

    def moments(fs):
        mu = fs.features.mean(axis=0)
        cov = np.cov(fs.features, rowvar=False)
        cov = np.atleast_2d(cov)
        if fs.n < fs.d + 1 and shrinkage <= 0:
            raise NumericalError(
                f"covariance of {fs.n} rows in {fs.d} dims is degenerate; "
                f"pass shrinkage > 0")
        if shrinkage > 0:
            scale = np.trace(cov) / fs.d if fs.d else 1.0
            cov = (1 - shrinkage) * cov + shrinkage * scale * np.eye(fs.d)
        return mu, cov

    mu_a, cov_a = moments(a)
    mu_b, cov_b = moments(b)
    root_a = _sym_sqrt(cov_a)
    cross = _sym_sqrt(root_a @ cov_b @ root_a)
    d2 = float(np.sum((mu_a - mu_b) ** 2)
               + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def density_coverage(real: FeatureSet, fake: FeatureSet, k: int) -> tuple[float, float]:
    """k-NN manifold metrics.

    With r_i the distance from real point i to its k-th nearest other real
    point: density counts how many fake points land inside the real balls
    (normalized by k * n_fake); coverage is the fraction of real points whose
    ball contains at least one fake point.
    """
    if real.extractor_id != fake.extractor_id:
        raise ValueError("feature sets from different extractors")
    if k >= real.n:
        raise ValueError(f"k={k} must be smaller than the real set size {real.n}")
    d_rr = cdist(real.features, real.features)
    # row-wise k-th smallest excluding self (self-distance 0 occupies slot 0)
    radii = np.partition(d_rr, k, axis=1)[:, k]
    d_fr = cdist(fake.features, real.features)
    inside = d_fr <= radii[None, :]
    density = float(inside.sum()) / (k * fake.n)
    coverage = float(inside.any(axis=0).mean())
    return density, coverage
