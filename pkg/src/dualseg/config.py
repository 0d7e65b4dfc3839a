"""Training configuration: defaults, file loading, and dotted overrides.

A resolved configuration is a plain nested dataclass tree.  Precedence is
defaults < config file < command-line overrides, and every run persists the
resolved tree as JSON so a result can always be traced back to the exact
values it ran with.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError
from .networks import BackboneSpec

STAGES = ("gfs", "lis")
CROP_MODES = ("oracle", "learned")

_STAGE_EPOCHS = {"gfs": 500, "lis": 200}


@dataclass
class AugmentCfg:
    enabled: bool = True
    rotate_deg: float = 15.0
    flip: bool = True
    noise_sigma: float = 0.02

    def validate(self) -> None:
        if self.rotate_deg < 0 or self.rotate_deg > 180:
            raise ConfigError(f"rotate_deg out of range: {self.rotate_deg}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class ContrastCfg:
    temperature: float = 0.05
    patch_h: int = 3
    patch_w: int = 3
    cap: int = 32
    weight: float = 1.0
    centerline_radius: int = 2
    ring_lo: int = 10
    ring_hi: int = 20

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.patch_h < 1 or self.patch_w < 1:
            raise ConfigError("patch size must be >= 1")
        if self.cap < 2:
            raise ConfigError(f"cap must be >= 2, got {self.cap}")
        if self.weight < 0:
            raise ConfigError(f"weight must be >= 0, got {self.weight}")
        if not 1 <= self.ring_lo <= self.ring_hi:
            raise ConfigError(f"bad ring radius range ({self.ring_lo}, {self.ring_hi})")


@dataclass
class UncertCfg:
    views: int = 8
    schedule_start: float = 0.2
    schedule_end: float = 0.001
    test_threshold: float = 0.01
    report_threshold: float = 0.01
    corrupt_lo_min: float = -200.0
    corrupt_lo_max: float = 40.0
    corrupt_hi_min: float = 120.0
    corrupt_hi_max: float = 400.0
    corrupt_min_width: float = 80.0

    def validate(self) -> None:
        if not 1 <= self.views <= 8:
            raise ConfigError(f"views must be in 1..8, got {self.views}")
        for name in ("schedule_start", "schedule_end", "test_threshold", "report_threshold"):
            v = getattr(self, name)
            if v <= 0:
                raise ConfigError(f"{name} must be > 0, got {v}")
        if self.schedule_end > self.schedule_start:
            raise ConfigError("schedule_end must not exceed schedule_start")
        if self.corrupt_lo_min > self.corrupt_lo_max or self.corrupt_hi_min > self.corrupt_hi_max:
            raise ConfigError("corruption window ranges must be non-empty")
        if self.corrupt_min_width <= 0:
            raise ConfigError("corrupt_min_width must be > 0")


@dataclass
class OptimCfg:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    # When true the decay factor multiplies the already-decayed rate each
    # iteration instead of rescaling the base rate; kept as a switch because
    # the compounding form collapses the rate too fast to be usable.
    compound_decay: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")


@dataclass
class LossCfg:
    rec_lambda: float = 0.9
    adv_weight: float = 0.01
    eps: float = 1e-7

    def validate(self) -> None:
        if not 0 <= self.rec_lambda <= 1:
            raise ConfigError(f"rec_lambda must be in [0, 1], got {self.rec_lambda}")
        if self.adv_weight < 0:
            raise ConfigError(f"adv_weight must be >= 0, got {self.adv_weight}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


@dataclass
class CropCfg:
    mode: str = "oracle"
    margin: int = 8

    def validate(self) -> None:
        if self.mode not in CROP_MODES:
            raise ConfigError(f"crop mode must be one of {CROP_MODES}, got {self.mode!r}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")


@dataclass
class BackboneCfg:
    levels: int = 4
    base_channels: int = 16
    groups: int = 8
    projection_channels: int = 32

    def validate(self) -> None:
        self.to_spec(in_channels=1)

    def to_spec(self, in_channels: int) -> BackboneSpec:
        return BackboneSpec(
            levels=self.levels,
            base_channels=self.base_channels,
            groups=self.groups,
            in_channels=in_channels,
            projection_channels=self.projection_channels,
        )


@dataclass
class TrainConfig:
    stage: str = "gfs"
    epochs: int | None = None
    batch_size: int = 1
    seed: int = 0
    backbone: BackboneCfg = field(default_factory=BackboneCfg)
    crop: CropCfg = field(default_factory=CropCfg)
    augment: AugmentCfg = field(default_factory=AugmentCfg)
    contrast: ContrastCfg = field(default_factory=ContrastCfg)
    uncert: UncertCfg = field(default_factory=UncertCfg)
    optim: OptimCfg = field(default_factory=OptimCfg)
    loss: LossCfg = field(default_factory=LossCfg)

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs is None:
            self.epochs = _STAGE_EPOCHS[self.stage]

    def validate(self) -> "TrainConfig":
        if self.epochs is None or self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for name in ("backbone", "crop", "augment", "contrast", "uncert", "optim", "loss"):
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    """Coerce a string override onto the type of the default it replaces."""
    if not isinstance(value, str):
        return value
    if target_type is bool or isinstance(target_type, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot parse {value!r} as bool")
    if target_type is int:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as int") from exc
    if target_type is float:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as float") from exc
    return value


def _apply_tree(cfg: Any, tree: dict[str, Any], prefix: str = "") -> None:
    known = {f.name: f for f in fields(cfg)}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key: {path}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a mapping, got {type(value).__name__}")
            _apply_tree(current, value, prefix=f"{path}.")
        else:
            target = type(current) if current is not None else None
            if target is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            elif target is not None:
                value = _coerce(value, target, path)
            setattr(cfg, key, value)


def _nest_dotted(overrides: dict[str, Any]) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if any(not p for p in parts):
            raise ConfigError(f"malformed override key: {dotted!r}")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return tree


def parse_override(text: str) -> tuple[str, str]:
    """Split a KEY=VALUE command-line override."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, _, value = text.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key, value.strip()


def resolve_config(
    stage: str,
    config_file: str | None = None,
    overrides: dict[str, Any] | None = None,
    desk: bool = False,
) -> TrainConfig:
    """Build a validated config from defaults, an optional file, and overrides.

    With ``desk`` the desk-scale profile is applied before the file and the
    overrides, so both can still adjust any profile value explicitly.
    """
    cfg = TrainConfig(stage=stage)
    if desk:
        cfg = desk_profile(cfg)
    if config_file is not None:
        try:
            with open(config_file, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_file}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {config_file}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        if data.get("stage", stage) != stage:
            raise ConfigError(
                f"config file stage {data['stage']!r} does not match requested stage {stage!r}"
            )
        _apply_tree(cfg, data)
    if overrides:
        _apply_tree(cfg, _nest_dotted(overrides))
    return cfg.validate()


def save_snapshot(cfg: TrainConfig, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_snapshot(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or "stage" not in data:
        raise ConfigError(f"not a config snapshot: {path}")
    cfg = TrainConfig(stage=data["stage"])
    _apply_tree(cfg, data)
    return cfg.validate()


def desk_profile(cfg: TrainConfig) -> TrainConfig:
    """Shrink network, crop, and contrast sizes to fit small synthetic volumes on one CPU.

    Leaves every published constant (temperature, schedule endpoints, test
    threshold, rec_lambda, adv_weight) untouched.  The projection keeps its
    channel-reducing shape (8 feature channels project to 4), and the
    contrastive weight drops to 0.005: at 8-channel feature width an
    unreduced, fully-weighted contrastive term dominates the loss and
    collapses in-source accuracy.
    """
    cfg.backbone.levels = 3
    cfg.backbone.base_channels = 8
    cfg.backbone.groups = 4
    cfg.backbone.projection_channels = 4
    cfg.crop.margin = 4
    cfg.contrast.ring_lo = 2
    cfg.contrast.ring_hi = 4
    cfg.contrast.weight = 0.005
    return cfg
