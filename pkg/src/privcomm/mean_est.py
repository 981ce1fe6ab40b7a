"""Mean estimation under central DP with per-client bit budgets.

Three layers:

* coordinate-subsampled Gaussian mechanism (CSGM): every client reports
  each of its ``{-c, +c}`` coordinates independently with probability
  ``gamma`` (one bit per reported coordinate, positions implied by shared
  randomness); the server rescales the sums and adds Gaussian noise;
* coordinate pre-selection: all clients first restrict to a shared random
  subset of ``d'`` coordinates, which caps the noise dimension;
* the l2 pipeline: Kashin representation, unbiased rounding to signs,
  pre-selected CSGM in the frame domain, linear decoding.

Each layer has a protocol API (client encode / server aggregate), a seeded
``*_run`` fast path producing identical output, and a vectorised
``simulate_*`` Monte-Carlo engine for many trials.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .accountant import NoiseCalibration, PrivacyBudget, audit_calibration, calibrate
from .errors import DimensionError, OutOfRangeError, ProtocolViolation
from .rng import Seeds, shared_uniform_row, shared_uniform_rows
from .stats import TranscriptStats
from .transforms import KashinFrame, SignVector, kashin_decode, kashin_encode, round_to_signs

# cap on uniforms drawn per vectorised chunk in the simulators
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class CsgmConfig:
    """Public parameters of one CSGM execution.

    ``private=False`` switches the Gaussian noise off; it exists for exact
    utility tests and provides no privacy.
    """

    n: int
    d: int
    gamma: float
    budget: PrivacyBudget
    c: float
    shared_seed: int = 0
    private: bool = True
    accounting: str = "closed-form"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise DimensionError(f"need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if not 0 < self.gamma <= 1:
            raise OutOfRangeError(f"sampling rate must lie in (0, 1], got {self.gamma}")
        if not self.c > 0:
            raise OutOfRangeError(f"magnitude c must be positive, got {self.c}")

    @classmethod
    def from_bits(cls, n: int, d: int, b: float, budget: PrivacyBudget, c: float, **kw) -> "CsgmConfig":
        """Sampling rate ``b/d`` for an expected budget of ``b`` bits, clamped to 1."""
        if not b > 0:
            raise OutOfRangeError(f"bit budget must be positive, got {b}")
        return cls(n, d, min(1.0, b / d), budget, c, **kw)

    def calibrate(self) -> NoiseCalibration | None:
        if not self.private:
            return None
        return calibrate(self.budget, self.gamma, self.d, self.c, self.accounting, n=self.n)


@dataclass(frozen=True)
class CsgmReport:
    """Coordinates a client was sampled on and the sign it sent for each."""

    client: int
    coords: np.ndarray
    positive: np.ndarray

    def __len__(self) -> int:
        return int(self.coords.size)

    def pairs(self) -> list[tuple[int, bool]]:
        return [(int(j), bool(s)) for j, s in zip(self.coords, self.positive)]

    @property
    def bits(self) -> int:
        # one sign bit per coordinate; positions follow from the shared seed
        return len(self)


@dataclass(frozen=True)
class MeanEstimate:
    estimate: np.ndarray
    calibration: NoiseCalibration | None
    stats: TranscriptStats


def client_mask(shared_seed: int, client: int, d: int, gamma: float) -> np.ndarray:
    """Sampling mask ``Z_i`` of one client, reproducible by client and server."""
    return shared_uniform_row(shared_seed, client, d) < gamma


def _positive_matrix(xs, c: float | None = None) -> np.ndarray:
    """Boolean ``(n, d)`` sign matrix from SignVectors or a ``{-c, +c}`` array."""
    if isinstance(xs, np.ndarray) and xs.dtype == bool:
        return xs
    if isinstance(xs, np.ndarray):
        if c is not None and not np.all(np.abs(xs) == c):
            raise OutOfRangeError("every entry must equal +c or -c")
        return xs > 0
    rows = [x.positive for x in xs]
    if not rows:
        raise DimensionError("need at least one client")
    return np.stack(rows)


def _net_counts(positive: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per coordinate, sampled ``+c`` count minus sampled ``-c`` count (exact integers)."""
    return (mask & positive).sum(axis=-2, dtype=np.int64) - (mask & ~positive).sum(axis=-2, dtype=np.int64)


def _noise_scale(cal: NoiseCalibration | None) -> float:
    return 0.0 if cal is None else math.sqrt(cal.sigma2_mean)


def _finish(net: np.ndarray, config: CsgmConfig, cal, noise_rng, bits: int) -> MeanEstimate:
    noise = noise_rng.standard_normal(config.d)
    estimate = config.c * net / (config.n * config.gamma) + _noise_scale(cal) * noise
    if cal is None:
        eps, delta = math.inf, 0.0
    else:
        closed, rdp = audit_calibration(cal)
        eps, delta = (closed if cal.method == "closed-form" else rdp), cal.target.delta
    stats = TranscriptStats.from_counts(bits, bits, config.n, accounted_eps=eps, accounted_delta=delta)
    return MeanEstimate(estimate, cal, stats)


def _resolve(config: CsgmConfig, calibration: NoiseCalibration | None) -> NoiseCalibration | None:
    if not config.private:
        return None
    if calibration is None:
        return config.calibrate()
    return calibration if calibration.n == config.n else calibration.with_n(config.n)


def csgm_client_encode(x: SignVector, client: int, config: CsgmConfig) -> CsgmReport:
    """Client side of CSGM: the signs of the coordinates selected by the shared mask."""
    if x.dim != config.d:
        raise DimensionError(f"client vector has dim {x.dim}, config expects {config.d}")
    if x.c != config.c:
        raise OutOfRangeError(f"client magnitude {x.c} differs from the configured c={config.c}")
    coords = np.flatnonzero(client_mask(config.shared_seed, client, config.d, config.gamma))
    return CsgmReport(client, coords, x.positive[coords])


def csgm_aggregate(
    reports: Iterable[CsgmReport],
    config: CsgmConfig,
    noise_rng: np.random.Generator,
    calibration: NoiseCalibration | None = None,
) -> MeanEstimate:
    """Server side of CSGM: rescaled coordinate sums plus Gaussian noise."""
    cal = _resolve(config, calibration)
    net = np.zeros(config.d, dtype=np.int64)
    bits = 0
    for rep in reports:
        coords = np.asarray(rep.coords)
        if coords.size and (coords.min() < 0 or coords.max() >= config.d):
            raise ProtocolViolation(f"client {rep.client} reported a coordinate outside [0, {config.d})")
        if coords.size != np.asarray(rep.positive).size:
            raise ProtocolViolation(f"client {rep.client} sent {coords.size} coordinates but {np.size(rep.positive)} signs")
        np.add.at(net, coords, np.where(rep.positive, 1, -1))
        bits += rep.bits
    return _finish(net, config, cal, noise_rng, bits)


def csgm_run(xs, config: CsgmConfig, noise_rng: np.random.Generator, calibration: NoiseCalibration | None = None) -> MeanEstimate:
    """All clients at once; output identical to encoding then aggregating."""
    positive = _positive_matrix(xs, config.c)
    if positive.shape != (config.n, config.d):
        raise DimensionError(f"expected data of shape {(config.n, config.d)}, got {positive.shape}")
    cal = _resolve(config, calibration)
    mask = shared_uniform_rows(config.shared_seed, config.n, config.d) < config.gamma
    return _finish(_net_counts(positive, mask), config, cal, noise_rng, int(mask.sum()))


def csgm_mse_identity(values: np.ndarray, gamma: float) -> float:
    """Exact noiseless CSGM risk ``sum_j (1/n^2)(1/gamma - 1) sum_i x_i(j)^2``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    return float((1 / gamma - 1) * np.sum(values**2) / n**2)


# --------------------------------------------------------------------------
# coordinate pre-selection
# --------------------------------------------------------------------------


def select_dprime(n: int, b: float, d: int, budget: PrivacyBudget) -> int:
    """Number of coordinates kept by pre-selection (constant 1 inside the min)."""
    eps, delta = budget.eps, budget.delta
    privacy_term = n**2 * eps**2 / ((math.log(1 / delta) + eps) * math.log(d / delta))
    return max(1, int(math.floor(min(d, n * b, privacy_term))))


def select_coordinates(d: int, dprime: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform ``dprime``-subset of ``range(d)`` (without replacement)."""
    if not 1 <= dprime <= d:
        raise OutOfRangeError(f"need 1 <= d' <= d, got d'={dprime}, d={d}")
    return np.sort(rng.choice(d, size=dprime, replace=False))


def csgm_preselect_run(
    xs,
    d: int,
    b: float,
    budget: PrivacyBudget,
    seeds: Seeds,
    c: float | None = None,
    *,
    dprime: int | None = None,
    private: bool = True,
    accounting: str = "closed-form",
    calibration: NoiseCalibration | None = None,
) -> MeanEstimate:
    """CSGM on a shared random subset of ``d'`` coordinates, rescaled by ``d/d'``.

    ``xs`` is a list of SignVectors or an ``(n, d)`` array of ``+-c``.
    Coordinates outside the subset are estimated as zero.
    """
    positive = _positive_matrix(xs, c)
    if c is None:
        if isinstance(xs, np.ndarray):
            raise OutOfRangeError("pass c when giving a sign array")
        c = xs[0].c
    n = positive.shape[0]
    if positive.shape[1] != d:
        raise DimensionError(f"data has dim {positive.shape[1]}, expected {d}")
    dp = select_dprime(n, b, d, budget) if dprime is None else dprime
    chosen = select_coordinates(d, dp, np.random.Generator(np.random.PCG64(seeds.selection)))
    config = CsgmConfig.from_bits(n, dp, b, budget, c, shared_seed=seeds.sampling, private=private, accounting=accounting)
    inner = csgm_run(positive[:, chosen], config, np.random.Generator(np.random.PCG64(seeds.noise)), calibration)
    estimate = np.zeros(d)
    estimate[chosen] = (d / dp) * inner.estimate
    return MeanEstimate(estimate, inner.calibration, inner.stats)


def preselect_calibration(
    n: int, d: int, b: float, budget: PrivacyBudget, c: float, accounting: str = "closed-form", dprime: int | None = None
) -> NoiseCalibration:
    """The calibration :func:`csgm_preselect_run` would compute, for reuse across trials."""
    dp = select_dprime(n, b, d, budget) if dprime is None else dprime
    return calibrate(budget, min(1.0, b / dp), dp, c, accounting, n=n)


# --------------------------------------------------------------------------
# l2 pipeline
# --------------------------------------------------------------------------


def l2_rounding_level(frame: KashinFrame, C: float) -> float:
    """Magnitude ``c`` of the sign vectors sent in the frame domain."""
    return frame.level * C / math.sqrt(frame.D)


def l2_mean_pipeline(
    x,
    C: float,
    b: float,
    budget: PrivacyBudget,
    frame: KashinFrame,
    seeds: Seeds,
    *,
    dprime: int | None = None,
    private: bool = True,
    accounting: str = "closed-form",
    calibration: NoiseCalibration | None = None,
) -> MeanEstimate:
    """Unbiased mean of vectors with ``||x_i||_2 <= C`` under a ``b``-bit budget.

    Kashin encoding, rounding to ``{-c, +c}^D``, pre-selected CSGM in
    dimension ``D``, then decoding.  The estimate is not projected back onto
    the ball.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError("expected an (n, d) array of client vectors")
    d = x.shape[1]
    xt = kashin_encode(x, frame, bound=C)
    c = l2_rounding_level(frame, C)
    positive = round_to_signs(xt, c, np.random.Generator(np.random.PCG64(seeds.rounding)))
    inner = csgm_preselect_run(
        positive, frame.D, b, budget, seeds, c,
        dprime=dprime, private=private, accounting=accounting, calibration=calibration,
    )
    return replace(inner, estimate=kashin_decode(inner.estimate, frame)[:d])


# --------------------------------------------------------------------------
# Monte-Carlo engines
# --------------------------------------------------------------------------


def _chunks(trials: int, per_trial: int) -> Iterable[int]:
    step = max(1, _CHUNK_ELEMS // max(per_trial, 1))
    done = 0
    while done < trials:
        t = min(step, trials - done)
        yield t
        done += t


def _masked_estimates(positive, selected, gamma, c, n, scale, sigma_mean, rng) -> np.ndarray:
    # positive: (t, n, d) or (n, d); selected: (t, d) boolean restriction
    t, d = selected.shape
    mask = (rng.random((t, n, d)) < gamma) & selected[:, None, :]
    net = _net_counts(positive, mask)
    noise = rng.standard_normal((t, d)) * sigma_mean
    return np.where(selected, scale * (c * net / (n * gamma) + noise), 0.0)


def _random_subsets(t: int, d: int, dprime: int, rng) -> np.ndarray:
    if dprime == d:
        return np.ones((t, d), dtype=bool)
    ranks = np.argsort(rng.random((t, d)), axis=1)[:, :dprime]
    sel = np.zeros((t, d), dtype=bool)
    np.put_along_axis(sel, ranks, True, axis=1)
    return sel


def simulate_csgm(
    values, c: float, gamma: float, trials: int, rng: np.random.Generator, sigma2_mean: float = 0.0
) -> np.ndarray:
    """``(trials, d)`` CSGM estimates for fixed data, masks drawn from ``rng``."""
    return simulate_preselect(values, c, gamma, None, trials, rng, sigma2_mean)


def simulate_preselect(
    values, c: float, gamma: float, dprime: int | None, trials: int, rng: np.random.Generator, sigma2_mean: float = 0.0
) -> np.ndarray:
    """``(trials, d)`` estimates of pre-selected CSGM for fixed data."""
    positive = _positive_matrix(np.asarray(values), c)
    n, d = positive.shape
    dprime = d if dprime is None else dprime
    sigma = math.sqrt(sigma2_mean)
    out = []
    for t in _chunks(trials, n * d):
        sel = _random_subsets(t, d, dprime, rng)
        out.append(_masked_estimates(positive, sel, gamma, c, n, d / dprime, sigma, rng))
    return np.concatenate(out)


def simulate_l2_pipeline(
    x,
    C: float,
    frame: KashinFrame,
    gamma: float,
    dprime: int,
    trials: int,
    rng: np.random.Generator,
    sigma2_mean: float = 0.0,
) -> np.ndarray:
    """``(trials, d)`` estimates of the full l2 pipeline for fixed data."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    xt = kashin_encode(x, frame, bound=C)
    c = l2_rounding_level(frame, C)
    D = frame.D
    sigma = math.sqrt(sigma2_mean)
    out = []
    for t in _chunks(trials, 2 * n * D):
        positive = round_to_signs(np.broadcast_to(xt, (t, n, D)), c, rng)
        sel = _random_subsets(t, D, dprime, rng)
        est = _masked_estimates(positive, sel, gamma, c, n, D / dprime, sigma, rng)
        out.append(kashin_decode(est, frame)[:, :d])
    return np.concatenate(out)


def sq_errors(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-trial squared l2 error."""
    return np.sum((np.asarray(estimates) - np.asarray(truth)) ** 2, axis=-1)


def stack_sign_vectors(xs: Sequence[SignVector]) -> np.ndarray:
    return np.stack([x.values() for x in xs])
