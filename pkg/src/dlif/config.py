"""Flat ``key = value`` configuration with ``#`` comments and comma lists."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from dlif.losses import AAIC_FORMS, LossWeights
from dlif.stylecross import LEVELS, MODES, StylePlan

CONTRASTS = ("aaic", "binary", "triplet", "none")
SELECTIONS = ("source_val", "target_eval")
SEED_ENV = "DLIF_SEED"


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 200
    steps_per_epoch: int = 0
    lr: float = 5e-4
    lr_halving_period: int = 50
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_aaic_u: float = 1.0
    lambda_idamb: float = 1.0
    lambda_ortho_u: float = 1.0
    lambda_aaic_v: float = 1.0
    lambda_liamb: float = 1.0
    lambda_ortho_v: float = 1.0
    tau: float = 0.07
    am_scale: float = 30.0
    m_live: float = 0.4
    m_spoof: float = 0.1
    id_scale: float = 16.0
    liamb_scale: float = 30.0
    aaic_form: str = "as_written"
    contrast: str = "aaic"
    triplet_margin: float = 0.1
    use_v: bool = True
    cwsa: bool = True
    cwsa_v: bool = False
    cwsa_reduction: int = 4
    sc_levels: list = field(default_factory=lambda: ["M", "H"])
    sc_mode: str = "parallel"
    sc_levels_v: list = field(default_factory=lambda: ["M", "H"])
    sc_mode_v: str = "parallel"
    input_size: int = 32
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    batch_ids_per_domain: int = 4
    batch_live_per_id: int = 4
    batch_spoof_per_id: int = 4
    augment: bool = True
    aug_scale_min: float = 0.8
    aug_scale_max: float = 1.0
    aug_rotation: float = 10.0
    selection: str = "source_val"
    val_fraction: float = 0.1
    calib_size: int = 192
    source_dir: str = ""
    target_dir: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.contrast not in CONTRASTS:
            raise ConfigError(f"contrast must be one of {CONTRASTS}")
        if self.aaic_form not in AAIC_FORMS:
            raise ConfigError(f"aaic_form must be one of {AAIC_FORMS}")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        for lv in list(self.sc_levels) + list(self.sc_levels_v):
            if lv not in LEVELS:
                raise ConfigError(f"style levels must be among {LEVELS}, got {lv!r}")
        for mode in (self.sc_mode, self.sc_mode_v):
            if mode not in MODES:
                raise ConfigError(f"style mode must be one of {MODES}")
        if self.id_scale <= 0 or self.liamb_scale <= 0:
            raise ConfigError("id_scale and liamb_scale must be positive")
        if len(self.stage_channels) != 3:
            raise ConfigError("stage_channels needs three values")
        self.loss_weights()

    @property
    def plan_u(self) -> StylePlan:
        return StylePlan(tuple(self.sc_levels), self.sc_mode)

    @property
    def plan_v(self) -> StylePlan:
        return StylePlan(tuple(self.sc_levels_v), self.sc_mode_v)

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda_aaic_u, self.lambda_idamb, self.lambda_ortho_u, self.lambda_aaic_v,
                               self.lambda_liamb, self.lambda_ortho_v, self.tau, self.am_scale,
                               self.m_live, self.m_spoof)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def valid_keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        valid = cls.valid_keys()
        for key, raw in values.items():
            if key not in valid:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")
            kwargs[key] = _coerce(getattr(defaults, key), raw, key)
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _coerce(default, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip() and s.strip() != "none"]
            if default and isinstance(default[0], int):
                return [int(s) for s in items]
            return items
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


def resolve_config(path=None, overrides: dict[str, str] | None = None,
                   environ: dict[str, str] | None = None) -> TrainConfig:
    """Defaults, then the config file, then ``--set`` overrides, then ``DLIF_SEED``."""
    values: dict[str, str] = {}
    if path is not None:
        values.update(read_kv_file(path))
    values.update(overrides or {})
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    return TrainConfig.from_mapping(values)
