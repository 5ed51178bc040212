"""Run configuration (single JSON file) and seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .autoencoder import VaeTrainConfig
from .diffusion import LdmTrainConfig


@dataclass
class DataConfig:
    n_rooms: int = 100
    height: int = 64  # panorama is height x 2*height; 256 for full-size runs
    ratios: tuple = (0.8, 0.1, 0.1)
    d_max: float = 10.0


@dataclass
class SampleConfig:
    sample_steps: int = 200
    n_samples: int = 1
    align: bool = True
    composite: bool = False


@dataclass
class EvalConfig:
    extractor_seed: int = 7
    feature_dim: int = 64
    k: int = 3
    shrinkage: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeTrainConfig = field(default_factory=VaeTrainConfig)
    ldm: LdmTrainConfig = field(default_factory=LdmTrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        h = self.data.height
        if h % 4 or h <= 0:
            raise ValueError(f"height must be a positive multiple of 4, got {h}")


_SECTIONS = {"data": DataConfig, "vae": VaeTrainConfig, "ldm": LdmTrainConfig,
             "sample": SampleConfig, "eval": EvalConfig}


def config_from_dict(raw: dict) -> RunConfig:
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            names = {f.name for f in dataclasses.fields(cls)}
            unknown = set(value) - names
            if unknown:
                raise ValueError(f"unknown keys in config section '{key}': {sorted(unknown)}")
            kwargs[key] = cls(**value)
        elif key == "seed":
            kwargs[key] = int(value)
        else:
            raise ValueError(f"unknown config key {key!r}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=2, sort_keys=True)


def derive_seed(master: int, label: str) -> int:
    """Stable per-stage seed from the master seed and a label."""
    blob = f"{master}:{label}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")
