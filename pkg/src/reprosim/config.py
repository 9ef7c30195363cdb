"""Scenario configuration: flat key=value sections, every key a CLI flag.

The config file is INI-style with one section per module; keys are unique
across sections so each maps to exactly one command-line flag of the same
name. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from .errors import ConfigError

SCENARIO_KINDS = ("table3-analog", "table4-analog", "table5-analog", "calibrate", "unit")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _parse_scale(text: str):
    if str(text).strip().lower() == "auto":
        return None
    return float(text)


@dataclass
class ScenarioConfig:
    seed: int = 0
    scenario: str = "table4-analog"

    # [data]
    image_size: int = 32
    target_size: int = 16
    channels: int = 3
    source_classes: int = 12
    target_classes: int = 2
    source_per_class: int = 60
    benign_per_class: int = 250
    target_train: int = 200
    target_test: int = 200
    tr_sizes: tuple = (200, 400)

    # [model]
    hidden: int = 256
    model_epochs: int = 12
    model_batch: int = 32
    model_lr: float = 1e-3
    surrogate_hidden: int = 320

    # [encoder]
    encoder_hidden: int = 256
    embed_dim: int = 32
    margin: float = 1.0
    encoder_epochs: int = 8
    encoder_batch: int = 32
    encoder_lr: float = 1e-4
    weight_decay: float = 1e-6
    pair_count: int = 1500
    pair_balance: float = 0.5

    # [detector]
    k: int = 10
    target_fpr: float = 0.001
    ban_on_detect: bool = False

    # [attack]
    group_size: int = 6
    gamma: float = 2.0
    step_size: float = 0.2
    attack_epochs: int = 10
    attack_batch: int = 25
    directions: int = 30
    q_grid: tuple = (5, 15, 30)
    smoothing: float = 0.1
    scale: float | None = None
    mask_directions: bool = False
    raw_update: bool = False
    table3_directions: int = 8
    table3_epochs: int = 8
    finetune_epochs: int = 8
    finetune_q_grid: tuple = (5, 15)
    accounts: int = 1

    def validate(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ConfigError(f"scenario must be one of {SCENARIO_KINDS}, got {self.scenario!r}")
        if self.target_size >= self.image_size:
            raise ConfigError("target_size must be smaller than image_size")
        if self.target_classes * self.group_size > self.source_classes:
            raise ConfigError("label mapping groups exceed available source classes")
        if self.target_train % self.target_classes or self.target_test % self.target_classes:
            raise ConfigError("target_train and target_test must divide evenly across classes")
        for size in self.tr_sizes:
            if size % self.target_classes:
                raise ConfigError(f"tr size {size} does not divide across classes")
        if not self.q_grid or not self.finetune_q_grid:
            raise ConfigError("q grids must be non-empty")
        if min(self.q_grid) < 1 or min(self.finetune_q_grid) < 1 or self.directions < 1:
            raise ConfigError("black-box scenarios need at least one direction")
        if self.accounts < 1:
            raise ConfigError("need at least one attacker account")
        if not 0.0 <= self.target_fpr <= 1.0:
            raise ConfigError("target_fpr must be in [0, 1]")
        return self


# keys are unique across sections by construction, one CLI flag each
CONFIG_LAYOUT = {
    "scenario": {"seed": int, "scenario": str},
    "data": {
        "image_size": int,
        "target_size": int,
        "channels": int,
        "source_classes": int,
        "target_classes": int,
        "source_per_class": int,
        "benign_per_class": int,
        "target_train": int,
        "target_test": int,
        "tr_sizes": _parse_int_list,
    },
    "model": {
        "hidden": int,
        "model_epochs": int,
        "model_batch": int,
        "model_lr": float,
        "surrogate_hidden": int,
    },
    "encoder": {
        "encoder_hidden": int,
        "embed_dim": int,
        "margin": float,
        "encoder_epochs": int,
        "encoder_batch": int,
        "encoder_lr": float,
        "weight_decay": float,
        "pair_count": int,
        "pair_balance": float,
    },
    "detector": {
        "k": int,
        "target_fpr": float,
        "ban_on_detect": _parse_bool,
    },
    "attack": {
        "group_size": int,
        "gamma": float,
        "step_size": float,
        "attack_epochs": int,
        "attack_batch": int,
        "directions": int,
        "q_grid": _parse_int_list,
        "smoothing": float,
        "scale": _parse_scale,
        "mask_directions": _parse_bool,
        "raw_update": _parse_bool,
        "table3_directions": int,
        "table3_epochs": int,
        "finetune_epochs": int,
        "finetune_q_grid": _parse_int_list,
        "accounts": int,
    },
}

_KEY_PARSERS = {}
for _section, _keys in CONFIG_LAYOUT.items():
    for _key, _parser in _keys.items():
        if _key in _KEY_PARSERS:
            raise RuntimeError(f"duplicate config key {_key}")
        _KEY_PARSERS[_key] = _parser

_FIELD_NAMES = {f.name for f in fields(ScenarioConfig)}
assert set(_KEY_PARSERS) == _FIELD_NAMES, "config layout out of sync with ScenarioConfig"


def load_config(path: str | None = None, overrides: dict | None = None) -> ScenarioConfig:
    """Build a config from defaults, an optional file, and CLI overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file {path!r} not found")
        for section in parser.sections():
            if section not in CONFIG_LAYOUT:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in CONFIG_LAYOUT[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in _KEY_PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return ScenarioConfig(**values).validate()


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    parser = _KEY_PARSERS[key]
    try:
        return parser(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {raw!r} for key {key!r}")


def write_default_config(path: str):
    """Emit a config file with every key at its default, grouped by section."""
    defaults = ScenarioConfig()
    lines = []
    for section, keys in CONFIG_LAYOUT.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(defaults, key)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = "auto"
            lines.append(f"{key} = {value}")
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))
