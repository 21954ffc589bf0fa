"""Run configuration: JSON file plus defaults, validated with field paths."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

OUT_ENV = "LESIONFAIR_OUT"

_positive = (lambda v: v > 0, "must be > 0")
_non_negative = (lambda v: v >= 0, "must be >= 0")
_fraction = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")
_correlation = (lambda v: -1 <= v <= 1, "must lie in [-1, 1]")
_number = (int, float)

# section -> key -> (default, accepted types, optional (check, message))
SCHEMA: dict[str, dict[str, tuple]] = {
    "scenarios": {
        "female_fractions": ([0.0, 0.25, 0.5, 0.75, 1.0], list, None),
        "seeds": ([0, 1, 2, 3, 4], list, None),
        "test_cell_size": (158, int, _non_negative),
        "age_ratio": (1.0, _number, _positive),
    },
    "cohort": {
        "seed": (0, int, None),
        "columns": ("default", (str, dict), None),
        "delimiter": (None, (str, type(None)), None),
    },
    "training": {
        "lambda": (5.0, _number, _non_negative),
        "learning_rate": (0.01, _number, _positive),
        "batch_size": (20, int, _positive),
        "max_epochs": (40, int, _positive),
        "patience": (10, int, _positive),
        "min_delta": (1e-4, _number, _non_negative),
        "hidden_dim": (16, int, _positive),
        "adversarial_mode": ("joint", str, (lambda v: v in ("joint", "alternating"), "must be joint or alternating")),
        "adversary_lr_scale": (1.0, _number, _positive),
        "strategies": (["base", "reinforce", "adversarial"], list, None),
    },
    "synthetic": {
        "feature_dim": (8, int, (lambda v: v >= 2, "must be >= 2")),
        "n_train": (800, int, _positive),
        "n_val": (200, int, _positive),
        "n_test": (400, int, (lambda v: v >= 4, "must be >= 4")),
        "class_signal": (2.0, _number, None),
        "sex_signal": (2.0, _number, None),
        "rho": (0.8, _number, _correlation),
        "noise_scale": (1.0, _number, _positive),
    },
}


@dataclass
class RunConfig:
    subcommand: str = ""
    metadata: Optional[Path] = None
    config_path: Optional[Path] = None
    out_dir: Optional[Path] = None
    scenarios: dict = field(default_factory=dict)
    cohort: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    verbosity: int = 0

    @property
    def seeds(self) -> list[int]:
        return list(self.scenarios["seeds"])

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in SCHEMA}


def _check_value(path: str, value: Any, types, check) -> None:
    if isinstance(value, bool) or not isinstance(value, types):
        raise ConfigError(f"{path}: unexpected type {type(value).__name__}")
    if check is not None and not check[0](value):
        raise ConfigError(f"{path}: {check[1]}, got {value!r}")


def _check_lists(cfg: dict) -> None:
    for i, f in enumerate(cfg["scenarios"]["female_fractions"]):
        _check_value(f"scenarios.female_fractions[{i}]", f, _number, _fraction)
    seeds = cfg["scenarios"]["seeds"]
    if not seeds:
        raise ConfigError("scenarios.seeds: must be non-empty")
    for i, s in enumerate(seeds):
        _check_value(f"scenarios.seeds[{i}]", s, int, None)
    if len(set(seeds)) != len(seeds):
        raise ConfigError("scenarios.seeds: must be distinct")
    for i, s in enumerate(cfg["training"]["strategies"]):
        if s not in ("base", "reinforce", "adversarial"):
            raise ConfigError(f"training.strategies[{i}]: unknown strategy {s!r}")
    if cfg["training"]["patience"] > cfg["training"]["max_epochs"]:
        raise ConfigError("training.patience: must not exceed training.max_epochs")


def validate_config(raw: dict) -> dict:
    """Defaults merged with ``raw``; raises :class:`ConfigError` naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a JSON object")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"<root>: unknown sections {sorted(unknown)}")
    out = {}
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section}: must be an object")
        extra = set(given) - set(keys)
        if extra:
            raise ConfigError(f"{section}.{sorted(extra)[0]}: unknown field")
        merged = {}
        for key, (default, types, check) in keys.items():
            value = given.get(key, copy.deepcopy(default))
            if key in given:
                _check_value(f"{section}.{key}", value, types, check)
            merged[key] = value
        out[section] = merged
    _check_lists(out)
    return out


def load_config(path: Optional[str | Path] = None, **overrides) -> RunConfig:
    """Read a JSON config (or use defaults when ``path`` is None)."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8") or "{}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
    cfg = validate_config(raw)
    return RunConfig(config_path=None if path is None else Path(path), **cfg, **overrides)


def default_out_dir() -> Optional[Path]:
    value = os.environ.get(OUT_ENV)
    return Path(value) if value else None
