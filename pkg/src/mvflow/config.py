"""Run configuration: a JSON object validated into :class:`SimConfig`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .grid import SpatialGrid
from .paths import TimeGrid

EXPERIMENTS = ("simulate", "invert", "domain", "converge", "oracle-check", "w2-check", "probe-assumption")


@dataclass
class SimConfig:
    family: dict = field(default_factory=lambda: {"name": "zero", "params": {}})
    s: float = 0.0
    T: float = 1.0
    n_steps: int = 100
    grid: dict = field(default_factory=lambda: {"lower": [0.0], "upper": [1.0], "points": [11]})
    replicas: int = 100
    seed: int = 0
    m_ladder: list = field(default_factory=lambda: [2.0, 5.0, 10.0, 50.0])
    n_ladder: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])
    experiment: str = "simulate"
    levels: int = 3
    domain_times: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    output_every: int = 1
    m_freeze: float = 50.0
    scheme: str = "euler"
    # w2-check: point for the time study, base point and offsets for the space study
    w2: dict = field(default_factory=lambda: {"x": None, "lags": [1, 2, 5, 10, 20, 50, 100],
                                              "offsets": [1e-3, 1e-2, 1e-1]})
    out: str = "out"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        fam = self.family
        if not isinstance(fam, dict) or not isinstance(fam.get("name"), str):
            raise ConfigurationError("needs an object with a string 'name'", "family")
        if not isinstance(fam.get("params", {}), dict):
            raise ConfigurationError("must be an object", "family.params")
        for name in ("n_steps", "replicas", "levels", "output_every", "threads"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"must be a positive integer, got {value!r}", name)
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError("must be an unsigned 64-bit integer", "seed")
        TimeGrid(self.s, self.T, self.n_steps)
        g = self.grid
        for key in ("lower", "upper", "points"):
            if key not in g:
                raise ConfigurationError("missing", f"grid.{key}")
        self.spatial_grid()
        for name in ("m_ladder", "n_ladder"):
            ladder = getattr(self, name)
            if not ladder or any(not b > a for a, b in zip(ladder, ladder[1:])) or ladder[0] <= 0:
                raise ConfigurationError("thresholds must be positive and strictly increasing", name)
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}", "experiment")
        if self.experiment == "converge" and self.levels < 3:
            raise ConfigurationError("convergence studies need at least 3 levels", "levels")
        if self.scheme not in ("euler", "heun"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}", "scheme")
        if not self.m_freeze > 0:
            raise ConfigurationError("must be positive", "m_freeze")
        for i, t in enumerate(self.domain_times):
            if not self.s <= t <= self.T:
                raise ConfigurationError(f"time {t} outside [s, T]", f"domain_times[{i}]")

    def time_grid(self) -> TimeGrid:
        return TimeGrid(float(self.s), float(self.T), int(self.n_steps))

    def spatial_grid(self) -> SpatialGrid:
        g = self.grid
        return SpatialGrid(tuple(g["lower"]), tuple(g["upper"]), tuple(g["points"]))

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path, **overrides) -> SimConfig:
    """Read a JSON config; ``overrides`` with value None are ignored."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"no such file {path}", "config") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", "config") from exc
    return config_from_dict(raw, **overrides)


def config_from_dict(raw: dict, **overrides) -> SimConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("top level must be an object", "config")
    known = set(SimConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys {unknown}", "config")
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "w2" in merged:
        merged["w2"] = {**SimConfig().w2, **merged["w2"]}
    return SimConfig(**merged)
