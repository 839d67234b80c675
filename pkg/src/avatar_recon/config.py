"""Configuration sections with JSON round-tripping.

Defaults are desk-scale. Where the original method states a value, the
template written by ``config_template`` records it next to the desk value
under a ``reference_`` key.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class LossConfig:
    lambda_i: float = 1.0
    lambda_eik: float = 0.1
    lambda_o: float = 0.1
    alpha: float = 100.0
    eikonal_form: str = "squared"  # or "abs"
    normal_norm: str = "l2"  # or "l1"


@dataclass
class SamplingConfig:
    n_surface: int = 1024
    n_near: int = 1024
    n_uniform: int = 256
    sigma: float = 0.1
    extent: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    decay: float = 0.1
    decay_every_epochs: int = 3
    steps_per_epoch: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    n_subjects: int = 8
    n_poses: int = 12
    resolution: int = 96
    image_size: int = 256
    amplitude: float = 0.03
    noise_sigma: float = 0.0
    extent: float = 1.0


@dataclass
class CanonicalConfig:
    steps: int = 3000
    hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    skip_in: list = field(default_factory=lambda: [2])
    n_freqs: int = 6
    encoder_channels: list = field(default_factory=lambda: [3, 16, 32, 64, 64])
    init_radius: float = 0.5
    dtype: str = "float32"
    mesh_resolution: int = 96
    holdout_poses: list = field(default_factory=list)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    losses: LossConfig = field(default_factory=LossConfig)


@dataclass
class HypernetConfig:
    steps: int = 3000
    encoder_widths: list = field(default_factory=lambda: [6, 256, 256, 256, 256, 256])
    encoder_skips: list = field(default_factory=lambda: [2, 3, 4])
    decoder_hidden: list = field(default_factory=lambda: [256, 256, 256])
    g_hidden: list = field(default_factory=lambda: [64, 64, 64, 64])
    head_scale: float = 1e-2
    init_radius: float = 0.5
    dtype: str = "float32"
    n_templates: int = 8
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, steps_per_epoch=10 ** 9))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    losses: LossConfig = field(default_factory=LossConfig)


@dataclass
class RefineConfig:
    max_iters: int = 3000
    refresh_every: int = 100
    newton_steps: int = 2
    tol_rel: float = 1e-4
    window: int = 100
    patience: int = 3
    mc_resolution: int = 64
    out_resolution: int = 128
    init_radius: float = 0.5
    anchor_weight: float = 1.0
    loss_threshold: float | None = None
    dtype: str = "float32"
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, steps_per_epoch=250))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    losses: LossConfig = field(default_factory=LossConfig)


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    canonical: CanonicalConfig = field(default_factory=CanonicalConfig)
    hypernet: HypernetConfig = field(default_factory=HypernetConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval_samples: int = 10000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, d: dict):
    kwargs = {}
    names = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k.startswith("reference_") or k.startswith("_"):
            continue
        if k not in names:
            raise ValueError(f"unknown config key {cls.__name__}.{k}")
        default = names[k].default_factory() if names[k].default_factory is not field().default_factory else None
        if hasattr(default, "__dataclass_fields__") and isinstance(v, dict):
            # merge over the section's own defaults
            base = asdict(default)
            base.update(v)
            kwargs[k] = _build(type(default), base)
        else:
            kwargs[k] = v
    return cls(**kwargs)


REFERENCE_VALUES = {
    "canonical": {
        "reference_widths": [262, 512, 512, 512, 512, 512, 512, 1],
        "reference_skip": "fourth layer",
        "reference_encoder": "stacked hourglass",
        "reference_batch_images": 4,
    },
    "hypernet": {
        "reference_encoder_widths": [6, 256, 256, 256, 256, 256],
        "reference_g_widths": [3, 1024, 512, 256, 128, 1],
    },
    "refine": {"reference_iters_hypernet_init": 1500, "reference_iters_random_init": 3000},
    "sampling": {"reference_n_surface": 8192, "reference_n_near": 8192, "reference_n_uniform": 2048, "reference_sigma": 0.1},
    "losses": {"reference_lambda_i": 1.0, "reference_lambda_eik": 0.1, "reference_lambda_o": 0.1, "reference_alpha": ">> 1"},
    "optim": {"reference_lr": 1e-3, "reference_decay": 0.1, "reference_decay_every_epochs": 3},
}


def config_template(cfg: Config | None = None) -> dict:
    """Config dict annotated with the reference values of the original method."""
    d = (cfg or Config()).to_dict()
    for section in ("canonical", "hypernet", "refine"):
        d[section].update(REFERENCE_VALUES.get(section, {}))
        for sub in ("sampling", "losses", "optim"):
            d[section][sub].update(REFERENCE_VALUES[sub])
    return d
