"""Flat run configuration: one dataclass drives every pipeline stage.

A config round-trips through JSON unchanged, rejects unknown keys on load,
and hashes canonically so any two runs can be compared by a single string.
Every run directory echoes its resolved config; re-running from that echo
reproduces the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from cvq.errors import ConfigError

_AXES = ("patch", "channel")


@dataclass
class RunConfig:
    seed: int = 0

    # synthetic corpus
    corpus_kind: str = "mixed"
    corpus_count: int = 5000
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 3
    num_classes: int = 10
    val_fraction: float = 0.1

    # tokenizer geometry
    axis: str = "channel"
    codebook_size: int = 512
    latent_channels: int = 16
    downsample: int = 8
    hidden: int = 96
    blocks: int = 2

    # tokenizer optimization
    beta: float = 0.25
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 5000
    batch_size: int = 32
    lambda_lpips: float = 1.0

    # nested channel dropout
    alpha: float = 0.25
    eta: float = 0.05
    lambda0: float = 1.0
    patch_mask_compat: bool = False

    # autoregressive generator
    car_dim: int = 128
    car_layers: int = 4
    car_heads: int = 4
    car_mlp_ratio: int = 4
    car_input_mode: str = "projector"
    car_lr: float = 1e-4
    car_beta1: float = 0.9
    car_beta2: float = 0.96
    car_weight_decay: float = 1e-3
    car_steps: int = 3000
    car_batch: int = 32

    # sampling
    temperature: float = 1.0
    top_k: int = 0  # 0 means the whole vocabulary
    gen_count: int = 16

    # evaluation / harness
    eval_batch: int = 64
    usage_window: int = 50
    sweep_channels: list = field(default_factory=lambda: [1, 2, 4, 8, 12, 16])
    compare_axes: list = field(default_factory=lambda: ["patch", "channel"])
    compare_sizes: list = field(default_factory=lambda: [64, 256, 512])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.axis not in _AXES:
            raise ConfigError(f"axis must be one of {_AXES}, got {self.axis!r}")
        for ax in self.compare_axes:
            if ax not in _AXES:
                raise ConfigError(f"compare_axes entry {ax!r} is not a token axis")
        if self.image_height % self.downsample or self.image_width % self.downsample:
            raise ConfigError(
                f"image size {self.image_height}x{self.image_width} not divisible "
                f"by downsample factor {self.downsample}"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.codebook_size < 1:
            raise ConfigError(f"codebook_size must be positive, got {self.codebook_size}")
        if self.latent_channels < 1:
            raise ConfigError(f"latent_channels must be positive, got {self.latent_channels}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0 (0 = full vocabulary), got {self.top_k}")
        if self.corpus_count < 0:
            raise ConfigError(f"corpus_count must be >= 0, got {self.corpus_count}")
        for name in ("steps", "batch_size", "car_steps", "car_batch",
                     "num_classes", "eval_batch", "usage_window", "gen_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        for key, value in d.items():
            ftype = known[key].type
            try:
                if ftype == "int":
                    coerced[key] = int(value)
                elif ftype == "float":
                    coerced[key] = float(value)
                elif ftype == "bool":
                    if not isinstance(value, bool):
                        raise TypeError
                    coerced[key] = value
                elif ftype == "list":
                    coerced[key] = list(value)
                else:
                    coerced[key] = str(value)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r} has invalid value {value!r}") from None
        return cls(**coerced)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            with open(p) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def updated(self, **overrides) -> "RunConfig":
        """Copy with fields replaced (validated)."""
        return replace(self, **overrides)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()
