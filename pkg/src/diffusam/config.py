"""Flat experiment configuration with content hashing.

Every key has a default; defaults follow the published training setup
(T=1000, 2 inference steps, unit loss weights, 7800 iterations, batch 4,
Adam at 1e-4) scaled down to 32x32 slices for the mock backbone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .backbone import BackboneSpec, MockBackbone
from .errors import ConfigError
from .network import DenoiserArch
from .prior import TrainConfig
from .schedule import SamplerConfig, make_schedule

OUTPUT_ROOT_ENV = "DIFFUSAM_OUTPUT_ROOT"
_UNHASHED = {"out"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = True
    # data
    n_volumes: int = 8
    slices_per_volume: int = 9
    height: int = 32
    width: int = 32
    k_classes: int = 4
    noise_std: float = 0.03
    source_store: str = "source_store"
    target_store: str = "target_store"
    n_target_volumes: int = 4
    shift_scale: float = 0.8
    shift_offset: float = 0.1
    shift_noise: float = 0.02
    split_fraction: float = 0.25
    split_seed: int = 0
    # backbone
    backbone_kind: str = "mock"
    backbone_seed: int = 0
    c_img: int = 8
    c_mem: int = 8
    emb_h: int = 16
    emb_w: int = 16
    fusion_weight: float = 0.3
    # schedule and sampler
    schedule: str = "constant"
    T: int = 1000
    beta_const: float = 0.008
    k_steps: int = 2
    stochastic: bool = False
    # prior and training
    base_width: int = 32
    levels: int = 1
    emb_dim: int = 64
    iterations: int = 7800
    batch_size: int = 4
    learning_rate: float = 1e-4
    lambda_prior: float = 1.0
    lambda_seg: float = 1.0
    optimizer: str = "adam"
    cross_slice_conditioning: bool = False
    target_noise: float = 0.0
    # inference
    use_adjacency: bool = True
    out: str = "runs/default"

    def __post_init__(self):
        try:
            self.backbone_spec()
            self.sampler_config()
            self.train_config()
            self.arch()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.backbone_kind != "mock":
            raise ConfigError("only the mock backbone ships with this package")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in d.items()})

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "ExperimentConfig":
        data = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"config {path} must be a JSON object")
        data.update(overrides or {})
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- derived objects ---------------------------------------------------

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(
            c_img=self.c_img, c_mem=self.c_mem, h=self.emb_h, w=self.emb_w,
            H=self.height, W=self.width, k=self.k_classes, kind=self.backbone_kind,
        )

    def make_backbone(self) -> MockBackbone:
        return MockBackbone(self.backbone_spec(), seed=self.backbone_seed, fusion_weight=self.fusion_weight)

    def make_schedule(self):
        return make_schedule(self.T, self.beta_const, kind=self.schedule)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(k_steps=self.k_steps, stochastic=self.stochastic)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size, learning_rate=self.learning_rate,
            lambda_prior=self.lambda_prior, lambda_seg=self.lambda_seg, optimizer=self.optimizer,
            seed=self.seed, T=self.T, beta_const=self.beta_const, k_steps=self.k_steps,
            cross_slice_conditioning=self.cross_slice_conditioning, target_noise=self.target_noise,
        )

    def arch(self) -> DenoiserArch:
        return DenoiserArch(
            c_mem=self.c_mem, c_img=self.c_img, h=self.emb_h, w=self.emb_w, k_classes=self.k_classes,
            base_width=self.base_width, levels=self.levels, emb_dim=self.emb_dim,
            cross_slice=self.cross_slice_conditioning,
        )

    def output_dir(self) -> Path:
        out = Path(self.out)
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
        return out

    def store_path(self, which: str) -> Path:
        p = Path(self.source_store if which == "source" else self.target_store)
        return p if p.is_absolute() else self.output_dir() / p


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {f.name}: {value!r} (expected {kind})") from exc
    return value


def parse_overrides(items) -> dict:
    """``["key=value", ...]`` into a dict; values are parsed as JSON when possible."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out
