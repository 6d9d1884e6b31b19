"""Experiment configuration: defaults, config-file parsing, flag merging.

Config files are flat ``key=value`` text; keys mirror the command-line
flags (dashes become underscores).  Values given on the command line win
over the file, the file wins over defaults.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .kernel import LatencyMatrix, load_latency_file, synthetic_latency
from .util import derive_seed

EXPERIMENTS = ("single-join", "mass-join", "bandwidth", "revoke", "model")
TIMERS = ("static", "dynamic")
METHODS = ("dht", "broadcast")


class ConfigError(Exception):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class ExperimentConfig:
    experiment: str = "single-join"
    public_size: int = 200
    private_sizes: List[int] = field(default_factory=lambda: [32])
    security: bool = False
    seed: int = 1
    latency_file: Optional[str] = None
    synthetic: Tuple[int, int] = (100, 100)
    synthetic_sites: int = 64
    timer: str = "dynamic"
    method: str = "broadcast"
    reps: int = 30
    out: str = "runs"
    # measurement windows (simulated minutes)
    settle_minutes: int = 65
    measure_minutes: int = 60

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.public_size < 1:
            raise ConfigError("public_size must be >= 1")
        if not self.private_sizes or any(s < 1 for s in self.private_sizes):
            raise ConfigError("private sizes must be positive integers")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.timer not in TIMERS:
            raise ConfigError(f"timer must be one of {TIMERS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        lo, hi = self.synthetic
        if lo < 0 or hi < lo:
            raise ConfigError("synthetic latency needs 0 <= MIN <= MAX")
        if self.synthetic_sites < 1:
            raise ConfigError("synthetic_sites must be >= 1")
        if self.settle_minutes < 0 or self.measure_minutes < 1:
            raise ConfigError("invalid measurement window")
        return self

    def single_private_size(self) -> int:
        if len(self.private_sizes) != 1:
            raise ConfigError(
                f"{self.experiment} takes exactly one private size, "
                f"got {self.private_sizes}"
            )
        return self.private_sizes[0]

    def latency(self) -> LatencyMatrix:
        if self.latency_file:
            return load_latency_file(self.latency_file)
        lo, hi = self.synthetic
        return synthetic_latency(self.synthetic_sites, lo, hi,
                                 derive_seed(self.seed, "latency"))

    def canonical_items(self) -> List[Tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "private_sizes":
                v = ",".join(str(s) for s in v)
            elif f.name == "synthetic":
                v = f"{v[0]},{v[1]}"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = ""
            out.append((f.name, str(v)))
        return out

    def digest(self) -> str:
        blob = "\n".join(f"{k}={v}" for k, v in self.canonical_items())
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(tok) for tok in str(text).split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad size list {text!r}") from None
    if not sizes:
        raise ConfigError("empty size list")
    return sizes


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def parse_synthetic(text: str) -> Tuple[int, int]:
    parts = str(text).split(",")
    if len(parts) != 2:
        raise ConfigError(f"synthetic wants MIN,MAX got {text!r}")
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"synthetic wants integers, got {text!r}") from None
    return lo, hi


_PARSERS = {
    "public_size": int,
    "private_size": parse_sizes,
    "security": parse_bool,
    "seed": int,
    "latency_file": str,
    "synthetic": parse_synthetic,
    "synthetic_sites": int,
    "timer": str,
    "method": str,
    "reps": int,
    "out": str,
    "settle_minutes": int,
    "measure_minutes": int,
}

_FIELD_OF = {"private_size": "private_sizes"}


def load_config_file(path: str) -> dict:
    """Parse a flat key=value config file into field overrides."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    overrides = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip()
        parser = _PARSERS.get(key)
        if parser is None:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            parsed = parser(value)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
        overrides[_FIELD_OF.get(key, key)] = parsed
    return overrides


def build_config(experiment: str, file_overrides: dict, flag_overrides: dict) -> ExperimentConfig:
    """Defaults, then config file, then explicit flags."""
    cfg = ExperimentConfig(experiment=experiment)
    for source in (file_overrides, flag_overrides):
        for key, value in source.items():
            if value is None:
                continue
            setattr(cfg, key, value)
    return cfg.validate()
