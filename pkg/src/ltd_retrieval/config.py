"""Experiment configuration."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigInvalid

MODES = (
    "baseline",
    "itd_dual",
    "itd_lagrange",
    "ltd_dual",
    "ltd_lagrange",
    "fixed_targets",
    "finetuned_targets",
)
LOSSES = ("infonce", "triplet")
DEFAULT_ETA = {"ltd": 0.2, "itd": 6.0}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "baseline"
    loss: str = "infonce"
    tau: float = 0.05
    beta: float = 1.0
    eta: float | None = None  # None: 0.2 for LTD, 6.0 for ITD
    margin: float = 0.2
    lambda_init: float = 1.0
    lambda_lr: float = 5e-3
    lambda_momentum: float = 0.9
    lambda_dampening: float = 0.9
    lambda_min: float = 0.0
    lambda_max: float = 100.0
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 0.5
    head_lr: float = 2e-5
    swa: bool = True
    swa_checkpoints: int = 5
    swa_fraction: float = 0.1
    swa_mode: str = "cumulative"
    caption_pooling: str = "mean"
    d_embed: int = 32
    hidden: int = 64
    d_joint: int = 64
    ltd_hidden: int = 64
    d_dec: int = 64
    d_dec_embed: int = 32
    model_seed: int = 0
    data_seed: int = 0  # dataset seed used by gen-data for run configs
    epoch_seed: int = 0

    @property
    def decoder(self):
        """``"ltd"``, ``"itd"`` or ``None``."""
        return self.mode.split("_")[0] if self.mode[:3] in ("ltd", "itd") else None

    @property
    def combiner(self):
        """``"dual"``, ``"lagrange"`` or ``None``."""
        if self.decoder is None:
            return None
        return self.mode.split("_")[1]

    @property
    def resolved_eta(self):
        if self.eta is not None:
            return self.eta
        return DEFAULT_ETA.get(self.decoder, DEFAULT_ETA["ltd"])

    @property
    def batchnorm(self):
        return self.loss == "triplet" and self.mode != "fixed_targets"

    @property
    def swa_enabled(self):
        # SWA is switched off for the triplet variant together with BatchNorm.
        return self.swa and not self.batchnorm

    def validate(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.loss not in LOSSES:
            raise ConfigInvalid(f"unknown loss {self.loss!r}")
        if self.mode == "finetuned_targets" and self.loss != "infonce":
            raise ConfigInvalid("finetuned_targets trains with InfoNCE only")
        if self.tau <= 0 or self.resolved_eta <= 0 or self.beta < 0 or self.margin < 0:
            raise ConfigInvalid("tau and eta must be positive; beta and margin non-negative")
        if not self.lambda_min <= self.lambda_init <= self.lambda_max:
            raise ConfigInvalid("lambda_init must lie inside [lambda_min, lambda_max]")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigInvalid("need epochs >= 1 and batch_size >= 2")
        if self.swa_mode not in ("cumulative", "per_epoch"):
            raise ConfigInvalid(f"unknown swa_mode {self.swa_mode!r}")
        if self.caption_pooling not in ("mean", "gru"):
            raise ConfigInvalid(f"unknown caption_pooling {self.caption_pooling!r}")
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, **kw).validate()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"dataset", "comment"}
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known}).validate()

    @classmethod
    def from_json(cls, path):
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        return cls.from_dict(raw)
