"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. Unknown keys are errors. Values are
coerced to the type of the matching :class:`RunConfig` field; tuples are
written comma-separated.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

SEED_ENV = "EMOBEV_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    # optimization
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    patience: int = 20
    lr_power: float = 1.0
    lr_floor: float = 0.0
    jobs: int = 1
    # inputs and prerequisites
    manifest: str = ""
    er_checkpoint: str = ""
    ec_dir: str = ""
    emotion: int = -1  # -1 trains all six emotion heads
    ec_batch_sizes: tuple = (64, 64, 64, 64, 64, 64)
    # behavior experiments
    l: int = 4
    n_avg_pools: int = 0
    seg_s: float = 1.0
    k_couples_out: int = 4
    n_valid_couples: int = 10
    n_extreme: int = 70
    per_gender: bool = True
    # synthetic corpora
    n: int = 200
    rule_kind: str = "order_dependent"
    theta: float = 0.3
    first_emotion: int = 0
    second_emotion: int = 3
    noise_std: float = 0.5
    event_rating: tuple = (1.5, 3.0)
    n_couples: int = 50

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
        return 0


_TYPES = get_type_hints(RunConfig)
_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == (int | None):
            return None if raw.lower() in ("", "none") else int(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            kind = type(_DEFAULTS[key][0])
            return tuple(kind(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def parse_config(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        pairs[key.strip()] = val.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        apply_overrides(cfg, parse_config(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "seed":
            val = cfg.resolved_seed()
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            val = str(val).lower()
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
