"""Synthetic client datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..freq_est import OneHotItem, pad_domain


def gen_synthetic_mean(n: int, d: int, seed: int, p: float = 0.8) -> np.ndarray:
    """``(n, d)`` array with entries ``+1/sqrt(d)`` w.p. ``p`` and ``-1/sqrt(d)`` otherwise.

    Every row has unit l2 norm and l-inf norm ``1/sqrt(d)``.
    """
    if n < 1 or d < 1:
        raise ConfigError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    c = 1 / math.sqrt(d)
    return np.where(rng.random((n, d)) < p, c, -c)


@dataclass(frozen=True)
class FreqData:
    """Items over a domain of ``d`` symbols, stored in the padded power-of-two domain."""

    indices: np.ndarray
    d: int
    padded_d: int
    counts: np.ndarray

    @property
    def n(self) -> int:
        return int(self.indices.size)

    def items(self) -> list[OneHotItem]:
        return [OneHotItem(int(t), self.padded_d) for t in self.indices]

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n


def zipf_probabilities(d: int, s: float) -> np.ndarray:
    weights = np.arange(1, d + 1, dtype=float) ** -s
    return weights / weights.sum()


def gen_synthetic_freq(n: int, d: int, distribution: str = "uniform", seed: int = 0, s: float = 1.1) -> FreqData:
    """``n`` i.i.d. items; ``zipf`` ranks symbols by index (symbol 0 most frequent)."""
    if n < 1 or d < 1:
        raise ConfigError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if distribution == "uniform":
        idx = rng.integers(0, d, size=n)
    elif distribution == "zipf":
        if not s > 0:
            raise ConfigError(f"zipf exponent must be positive, got {s}")
        idx = rng.choice(d, size=n, p=zipf_probabilities(d, s))
    else:
        raise ConfigError(f"unknown item distribution {distribution!r}")
    idx = idx.astype(np.int64)
    return FreqData(idx, d, pad_domain(d), np.bincount(idx, minlength=d))
