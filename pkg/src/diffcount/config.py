"""Run configuration: every tunable in one validated, serializable record.

Values resolve in the order defaults < JSON file < ``DIFFCOUNT_*`` environment
variables < command-line flags. Each run writes the effective config to
``<run_dir>/config.json``; loading that file reproduces the run.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .denoiser import DenoiserConfig
from .fusion import ORDERS, FusionConfig
from .groundtruth import MIN_WEIGHT
from .schedule import NoiseSchedule, build_schedule
from .train import TrainSettings

ENV_PREFIX = "DIFFCOUNT_"


class ConfigError(ValueError):
    pass


def _positive(v):
    return v > 0


def _unit_open(v):
    return 0 < v < 1


def _nonneg(v):
    return v >= 0


@dataclass
class RunConfig:
    # diffusion
    num_steps: int = 1000
    beta_start: float = 1e-3
    beta_end: float = 0.02
    snr_k: float = 1.0
    snr_gamma: float = 0.5
    # losses
    lambda_vlb: float = 1e-3
    lambda_count: float = 5e-3
    loss_reduction: str = "sum"
    # optimisation
    lr: float = 1e-4
    warmup: int = 5000
    iterations: int = 20000
    batch_size: int = 8
    crop: int = 256
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 2000
    # network
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 4, 4)
    attention_depths: tuple = (2, 3)
    num_res_blocks: int = 2
    time_embed_dim: int = 256
    count_hidden: tuple = (256, 64)
    count_branch: bool = True
    # inference
    realizations: int = 4
    sampling_steps: int = 100
    patch_size: int = 256
    threshold: float = 0.5 * MIN_WEIGHT
    sample_batch: int = 16
    # fusion
    fusion_beta: float = 0.85
    max_neighbors: int = 4
    search_fraction: float = 0.05
    fusion_order: str = "ascend_ssim"

    # field -> (predicate, description)
    _CHECKS = {
        "num_steps": (_positive, "a positive integer"),
        "beta_start": (_unit_open, "in (0, 1)"),
        "beta_end": (_unit_open, "in (0, 1)"),
        "snr_k": (_nonneg, ">= 0"),
        "snr_gamma": (_nonneg, ">= 0"),
        "lambda_vlb": (_nonneg, ">= 0"),
        "lambda_count": (_nonneg, ">= 0"),
        "loss_reduction": (lambda v: v in ("sum", "mean"), "'sum' or 'mean'"),
        "lr": (_positive, "> 0"),
        "warmup": (_nonneg, ">= 0"),
        "iterations": (_positive, "a positive integer"),
        "batch_size": (_positive, "a positive integer"),
        "crop": (_positive, "a positive integer"),
        "weight_decay": (_nonneg, ">= 0"),
        "log_every": (_nonneg, ">= 0"),
        "checkpoint_every": (_nonneg, ">= 0"),
        "base_channels": (_positive, "a positive integer"),
        "channel_multipliers": (lambda v: len(v) > 0 and min(v) >= 1, "a non-empty list of positive ints"),
        "num_res_blocks": (_positive, "a positive integer"),
        "time_embed_dim": (_positive, "a positive integer"),
        "count_hidden": (lambda v: all(h >= 1 for h in v), "a list of positive ints"),
        "realizations": (_positive, "a positive integer"),
        "sampling_steps": (_positive, "a positive integer"),
        "patch_size": (_positive, "a positive integer"),
        "threshold": (_positive, "> 0"),
        "sample_batch": (_positive, "a positive integer"),
        "fusion_beta": (_positive, "> 0"),
        "max_neighbors": (_positive, "a positive integer"),
        "search_fraction": (_positive, "> 0"),
        "fusion_order": (lambda v: v in ORDERS, f"one of {ORDERS}"),
    }

    def __post_init__(self):
        for name in ("channel_multipliers", "attention_depths", "count_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            want = _field_type(f)
            if want in (int, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{f.name}: expected a number, got {value!r}")
            if want is int and isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{f.name}: expected an integer, got {value!r}")
            check = self._CHECKS.get(f.name)
            if check and not check[0](value):
                raise ConfigError(f"{f.name}: must be {check[1]}, got {value!r}")
        if self.beta_start > self.beta_end:
            raise ConfigError(f"beta_start: must not exceed beta_end ({self.beta_start} > {self.beta_end})")
        if self.sampling_steps > self.num_steps:
            raise ConfigError(f"sampling_steps: must not exceed num_steps ({self.num_steps})")
        depths = len(self.channel_multipliers)
        if any(d < 0 or d >= depths for d in self.attention_depths):
            raise ConfigError(f"attention_depths: entries must lie in 0..{depths - 1}")
        factor = 2 ** (depths - 1)
        for name in ("crop", "patch_size"):
            if getattr(self, name) % factor:
                raise ConfigError(f"{name}: must be divisible by {factor} for this network depth")

    # -- views consumed by the library ------------------------------------------

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_steps, self.beta_start, self.beta_end, self.snr_k, self.snr_gamma)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            attention_depths=self.attention_depths,
            num_res_blocks_per_depth=self.num_res_blocks,
            time_embed_dim=self.time_embed_dim,
            count_hidden=self.count_hidden,
            count_branch=self.count_branch,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            steps=self.iterations, batch_size=self.batch_size, crop=self.crop, lr=self.lr,
            warmup=self.warmup, weight_decay=self.weight_decay, lambda_vlb=self.lambda_vlb,
            lambda_count=self.lambda_count if self.count_branch else 0.0,
            loss_reduction=self.loss_reduction, seed=self.seed, log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
        )

    def fusion_config(self, order: str | None = None) -> FusionConfig:
        return FusionConfig(beta=self.fusion_beta, max_neighbors=self.max_neighbors,
                            search_radius_fraction=self.search_fraction,
                            order=order or self.fusion_order)

    def realization_seeds(self) -> list[int]:
        return [self.seed * 1000 + r for r in range(self.realizations)]

    # -- (de)serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in fields(self) for v in [getattr(self, f.name)]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _field_type(f):
    default = f.default
    return type(default) if not isinstance(default, tuple) else tuple


def parse_value(f, text: str):
    """Convert a flag or env string into the field's type."""
    kind = _field_type(f)
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        if kind is int:
            return int(float(text)) if float(text).is_integer() else float(text)
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: cannot parse {text!r}") from exc


def env_overrides(environ=None) -> dict:
    """``DIFFCOUNT_LR=3e-4`` -> ``{"lr": 3e-4}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for f in fields(RunConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            out[f.name] = parse_value(f, environ[key])
    return out


def desk_config(**changes) -> RunConfig:
    """Small CPU-sized setup used for synthetic experiments and CI."""
    base = dict(
        base_channels=16, channel_multipliers=(1, 2, 2), attention_depths=(2,), num_res_blocks=1,
        time_embed_dim=64, count_hidden=(64, 32), crop=32, patch_size=32, lr=3e-4, warmup=200,
        iterations=12000, sampling_steps=25, checkpoint_every=0, log_every=250,
    )
    base.update(changes)
    return RunConfig(**base)
