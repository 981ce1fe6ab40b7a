"""Experiment configuration."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError

MEAN_PROTOCOLS = ("csgm", "csgm-preselect", "l2-pipeline", "gaussian-baseline")
FREQ_PROTOCOLS = ("rhr",)
SHUFFLE_PROTOCOLS = ("shuffled-sqkr", "sqkr-ldp-baseline")
PROTOCOLS = MEAN_PROTOCOLS + FREQ_PROTOCOLS + SHUFFLE_PROTOCOLS
ACCOUNTING = ("closed-form", "rdp")


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep over a grid of target eps values.

    ``b`` is the per-client bit budget; ``csgm`` alternatively takes the
    sampling rate ``gamma`` (exactly one of the two).  ``gaussian-baseline``
    needs neither.
    """

    protocol: str
    n: int
    d: int
    eps_grid: tuple[float, ...]
    delta: float
    b: float | None = None
    gamma: float | None = None
    trials: int = 100
    data_seed: int = 0
    protocol_seed: int = 0
    accounting: str = "closed-form"
    distribution: str = "uniform"
    zipf_s: float = 1.1
    b0: int = 1
    norm_bound: float = 1.0
    kashin_level: float = 8.0
    sign_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        p = self.protocol
        if p not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {p!r}; choose one of {', '.join(PROTOCOLS)}")
        if self.accounting not in ACCOUNTING:
            raise ConfigError(f"accounting must be one of {ACCOUNTING}, got {self.accounting!r}")
        for name in ("n", "d", "trials", "b0", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.eps_grid:
            raise ConfigError("eps_grid must not be empty")
        if any(not (e > 0 and math.isfinite(e)) for e in self.eps_grid):
            raise ConfigError("every eps in the grid must be positive and finite")
        if any(b <= a for a, b in zip(self.eps_grid, self.eps_grid[1:])):
            raise ConfigError("eps_grid must be strictly increasing")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if p == "csgm":
            if (self.b is None) == (self.gamma is None):
                raise ConfigError("csgm needs exactly one of b and gamma")
        elif p == "gaussian-baseline":
            if self.gamma not in (None, 1, 1.0):
                raise ConfigError("gaussian-baseline always uses gamma = 1")
        else:
            if self.b is None:
                raise ConfigError(f"{p} needs the bit budget b")
            if self.gamma is not None:
                raise ConfigError(f"{p} derives its sampling rate from b; do not set gamma")
        if self.b is not None and not self.b > 0:
            raise ConfigError(f"b must be positive, got {self.b}")
        if p in FREQ_PROTOCOLS + SHUFFLE_PROTOCOLS and self.b is not None and int(self.b) != self.b:
            raise ConfigError(f"{p} needs an integer bit budget, got {self.b}")
        if self.gamma is not None and not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.norm_bound > 0 or not self.kashin_level > 0:
            raise ConfigError("norm_bound and kashin_level must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        missing = {"protocol", "n", "d", "eps_grid", "delta"} - set(data)
        if missing:
            raise ConfigError(f"missing configuration keys: {', '.join(sorted(missing))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["eps_grid"] = list(self.eps_grid)
        return out

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes) if changes else self
