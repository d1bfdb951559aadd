"""Run configuration: a flat key/value document plus ``--set key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .rdb import LossConfig
from .ssl import SSLConfig
from .tpl import TPLConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    dataset: str = ""  # dataset directory; empty means <out>/data
    image_size: tuple = (192, 192)
    synthetic_count: int = 32
    synthetic_test: int = 8
    synthetic_landmarks: int = 5
    synthetic_max_displacement: float = 8.0
    template_id: str = ""  # empty keeps the dataset's own template
    # self-supervised stage
    patch_size: tuple = (96, 96)
    matrix_size: tuple = (19, 19)
    levels: int = 4
    widths: tuple = (8, 16, 32, 32)
    embed_dim: int = 16
    alpha: float = 0.1
    beta: float = 0.7
    tau: float = 10.0
    epsilon: float = 1e-8
    clip_mode: str = "scaled"
    ssl_epochs: int = 300
    ssl_batch_size: int = 8
    ssl_lr: float = 1e-3
    ssl_lr_decay: float = 0.5
    ssl_decay_fraction: float = 0.1
    ssl_points_per_patch: int = 8
    mirror_init: bool = True
    max_rotation: float = 15.0
    brightness: float = 0.2
    contrast: tuple = (0.8, 1.25)
    gamma: tuple = (0.8, 1.25)
    decode_mode: str = "product"
    decode_radius: int = 2
    viz_image: str = ""  # empty: first image of the evaluation split
    # detector stage
    tpl_radius: float = 10.0
    tpl_base_width: int = 16
    tpl_depth: int = 4
    tpl_epochs: int = 150
    tpl_batch_size: int = 8
    tpl_lr: float = 3e-3
    tpl_lr_decay: float = 0.1
    tpl_decay_fraction: float = 1 / 3
    tpl_stride: int = 2
    tpl_augment: bool = True
    # evaluation
    radii_mm: tuple = (2.0, 2.5, 3.0, 4.0, 6.0, 8.0)
    eval_source: str = "tpl"  # tpl | ssl | labels
    eval_predictions: str = ""  # directory of annotation files when eval_source == labels
    eval_split: str = "test"  # test | unlabeled
    # sweep
    sweep_alphas: tuple = (0.04, 0.07, 0.10, 0.13, 0.16)
    sweep_betas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    sweep_mode: str = "grid"  # grid (cartesian) | table (one-factor rows around alpha=0.1, beta=0.7)
    sweep_base_alpha: float = 0.1
    sweep_base_beta: float = 0.7

    # -- derived module configs ------------------------------------------------

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta, self.tau, self.matrix_size, self.levels,
                          self.epsilon, self.clip_mode)

    def ssl_config(self) -> SSLConfig:
        return SSLConfig(
            patch_size=self.patch_size,
            loss=self.loss_config(),
            encoder=EncoderConfig(self.levels, self.widths, self.embed_dim, self.mirror_init),
            augment=AugmentConfig(self.max_rotation, self.brightness, self.contrast, self.gamma),
            epochs=self.ssl_epochs,
            batch_size=self.ssl_batch_size,
            lr=self.ssl_lr,
            lr_decay=self.ssl_lr_decay,
            decay_fraction=self.ssl_decay_fraction,
            points_per_patch=self.ssl_points_per_patch,
        )

    def tpl_config(self) -> TPLConfig:
        return TPLConfig(self.tpl_radius, self.tpl_base_width, self.tpl_depth, self.tpl_epochs,
                         self.tpl_batch_size, self.tpl_lr, self.tpl_lr_decay, self.tpl_decay_fraction,
                         self.tpl_stride, self.tpl_augment)

    def validate(self) -> "RunConfig":
        """Check every module precondition; raises :class:`ConfigError`."""
        try:
            for name in ("image_size", "patch_size", "matrix_size", "contrast", "gamma"):
                if len(getattr(self, name)) != 2:
                    raise ValueError(f"{name} needs two values")
            if min(self.image_size) < 1:
                raise ValueError("image_size must be positive")
            if self.synthetic_count < 2 or self.synthetic_landmarks < 1 or self.synthetic_test < 0:
                raise ValueError("synthetic_count >= 2, synthetic_landmarks >= 1, synthetic_test >= 0 required")
            self.ssl_config().validate(self.image_size)
            self.tpl_config().validate()
            if self.decode_mode not in ("product", "windowed"):
                raise ValueError(f"decode_mode must be product or windowed, got {self.decode_mode!r}")
            if self.decode_radius < 0:
                raise ValueError("decode_radius must be >= 0")
            if not self.radii_mm or any(r <= 0 for r in self.radii_mm):
                raise ValueError("radii_mm must be a non-empty list of positive radii")
            if self.eval_source not in ("tpl", "ssl", "labels"):
                raise ValueError(f"eval_source must be tpl, ssl or labels, got {self.eval_source!r}")
            if self.eval_split not in ("test", "unlabeled"):
                raise ValueError(f"eval_split must be test or unlabeled, got {self.eval_split!r}")
            if self.sweep_mode not in ("grid", "table"):
                raise ValueError(f"sweep_mode must be grid or table, got {self.sweep_mode!r}")
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return from_mapping({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, tuple):
            if isinstance(value, (int, float)):
                value = [value]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            kind = type(default[0]) if default else float
            return tuple(kind(v) if kind is not int else int(v) for v in value)
        if isinstance(default, bool):
            if isinstance(value, str):
                value = {"true": True, "false": False, "1": True, "0": False}[value.strip().lower()]
            if not isinstance(value, (bool, int)) or value not in (0, 1):
                raise TypeError
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError, KeyError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def from_mapping(mapping: dict) -> RunConfig:
    return RunConfig(**{k: _coerce(k, v) for k, v in mapping.items()})


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    mapping = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must be a flat key/value mapping")
        mapping.update(loaded)
    for text in overrides:
        k, v = parse_override(text)
        mapping[k] = v
    if seed is not None:
        mapping["seed"] = seed
    return from_mapping(mapping).validate()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
