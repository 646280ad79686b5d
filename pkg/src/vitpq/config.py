"""Run configuration: one serializable object drives every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .vit import ViTConfig

LN_ACT_MODES = ("layer_wise", "channel_wise", "scale_reparam", "clipped_cw")
ALLOCATION_MODES = ("uniform", "paper", "greedy")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; serializes round-trippably to JSON.

    Stage seeds derive from the master seed: dataset generation uses
    ``seed``..``seed+2``, parameter init ``seed+10``, training ``seed+11``,
    importance sampling ``seed+12``.
    """

    vit: ViTConfig = field(default_factory=ViTConfig)
    base_bits: int = 4
    mode: str = "greedy"
    ln_act_mode: str = "clipped_cw"
    n_sigma: float = 2.0
    percentile: float = 99.99
    calib_size: int = 32
    importance_samples: int = 256
    boost_blocks: int = 2
    demote_depth: int = 1
    seed: int = 0
    train_epochs: int = 30
    train_lr: float = 0.3
    train_batch: int = 32
    train_per_class: int = 256
    eval_per_class: int = 200
    channel_spread_seed: int | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if self.mode not in ALLOCATION_MODES:
            raise ConfigError(f"mode must be one of {ALLOCATION_MODES}, got {self.mode!r}")
        if self.ln_act_mode not in LN_ACT_MODES:
            raise ConfigError(f"ln_act_mode must be one of {LN_ACT_MODES}")
        if self.base_bits < 2:
            raise ConfigError("base_bits must be >= 2")
        if not 0.0 < self.percentile <= 100.0:
            raise ConfigError("percentile must be in (0, 100]")
        if self.n_sigma < 0:
            raise ConfigError("n_sigma must be non-negative")
        for name in ("calib_size", "importance_samples", "train_epochs",
                     "train_batch", "train_per_class", "eval_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_lr <= 0:
            raise ConfigError("train_lr must be positive")
        if self.demote_depth < 1:
            raise ConfigError("demote_depth must be >= 1")

    # stage seeds
    @property
    def data_seed(self) -> int:
        return self.seed

    @property
    def init_seed(self) -> int:
        return self.seed + 10

    @property
    def train_seed(self) -> int:
        return self.seed + 11

    @property
    def importance_seed(self) -> int:
        return self.seed + 12

    def to_json(self) -> str:
        doc = {
            "vit": self.vit.to_dict(),
            "base_bits": self.base_bits,
            "mode": self.mode,
            "ln_act_mode": self.ln_act_mode,
            "n_sigma": self.n_sigma,
            "percentile": self.percentile,
            "calib_size": self.calib_size,
            "importance_samples": self.importance_samples,
            "boost_blocks": self.boost_blocks,
            "demote_depth": self.demote_depth,
            "seed": self.seed,
            "train_epochs": self.train_epochs,
            "train_lr": self.train_lr,
            "train_batch": self.train_batch,
            "train_per_class": self.train_per_class,
            "eval_per_class": self.eval_per_class,
            "channel_spread_seed": self.channel_spread_seed,
            "checkpoint": self.checkpoint,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        doc["vit"] = ViTConfig.from_dict(doc["vit"])
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def override(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)
