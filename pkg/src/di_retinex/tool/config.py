"""Run configuration: built-in defaults < JSON file < command-line flags.

JSON layout (every key optional)::

    {"epochs": 1000, "lr": 0.001, "weight_decay": 0.0001, "seed": 0,
     "small": false, "ablations": ["no-vs"],
     "loss": {"eta": 0.5, ...}, "enhancer": {"tau": 0.2, ...}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..adjust import EnhancerConfig
from ..objectives import LossConfig
from ..trainer import TrainConfig

_TOP = {"epochs", "lr", "weight_decay", "seed", "small", "ablations", "loss", "enhancer"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    small: bool = False
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "small": self.small, "paths": dict(self.paths)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


def _sub(cls, raw: dict, where: str):
    known = {f.name for f in fields(cls)}
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown {where} keys {sorted(bad)}; known: {sorted(known)}")
    return raw


def load_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def build_run_config(file_values: dict | None = None, cli: dict | None = None,
                     paths: dict | None = None) -> RunConfig:
    """Merge JSON values and CLI overrides (``None`` means "not given") onto defaults."""
    raw = dict(file_values or {})
    bad = set(raw) - _TOP
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}; known: {sorted(_TOP)}")
    for key, val in (cli or {}).items():
        if val is not None:
            raw[key] = val
    try:
        loss = LossConfig(**_sub(LossConfig, raw.get("loss", {}), "loss"))
        enh = EnhancerConfig(**_sub(EnhancerConfig, raw.get("enhancer", {}), "enhancer"))
        small = bool(raw.get("small", False))
        if small:
            enh = replace(enh, c_int=4, c_out=2)
        defaults = TrainConfig()
        train = TrainConfig(epochs=int(raw.get("epochs", defaults.epochs)),
                            lr=float(raw.get("lr", defaults.lr)),
                            weight_decay=float(raw.get("weight_decay", defaults.weight_decay)),
                            seed=int(raw.get("seed", defaults.seed)),
                            loss=loss, enhancer=enh,
                            ablations=tuple(raw.get("ablations", ())))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train=train, small=small, paths=dict(paths or {}))
