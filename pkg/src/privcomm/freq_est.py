"""Frequency estimation with subsampled recursive Hadamard response.

The domain ``[0, d)`` is split into ``2^(b-1)`` chunks of size
``B = d / 2^(b-1)``.  A client holding item ``t`` lives in chunk
``t // B`` at offset ``t % B``; the Hadamard transform of its chunk has
entries ``H[j, offset] = +-1/sqrt(B)`` in every row ``j``.  For each row
sampled by the shared mask (rate ``1/B``) the client sends its chunk index
and that entry's sign, ``b`` bits in total.

The server keeps one cell per ``(chunk, row)``, rescales by ``B/n``, adds
Gaussian noise to every cell and applies the (self-inverse) orthonormal
transform per chunk.  The estimate is unbiased for the empirical frequencies
``pi / n`` and is not projected onto the simplex.

Noise convention: ``sigma2`` is the per-cell variance on the unnormalised
``+-1`` Hadamard scale, where one client changes a row's cells by at most
``B/n``.  The orthonormal cells used internally therefore receive variance
``sigma2 / B``, and the per-coordinate estimation error is
``C_l (1 - 1/B) / n^2 + sigma2 / B`` for an item in a chunk holding ``C_l``
clients.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .accountant import NoiseCalibration, PrivacyBudget, audit_calibration, calibrate
from .errors import ConfigError, DimensionError, OutOfRangeError, ProtocolViolation
from .rng import Seeds, shared_uniform_row, shared_uniform_rows
from .stats import TranscriptStats
from .transforms import fwht, hadamard_sign, is_power_of_two, next_power_of_two

_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class OneHotItem:
    index: int
    d: int

    def __post_init__(self):
        if not is_power_of_two(self.d):
            raise DimensionError(f"domain size must be a power of two, got {self.d}")
        if not 0 <= self.index < self.d:
            raise OutOfRangeError(f"item {self.index} outside [0, {self.d})")

    def vector(self) -> np.ndarray:
        v = np.zeros(self.d)
        v[self.index] = 1.0
        return v


@dataclass(frozen=True)
class RhrReport:
    """One sampled row: which chunk the client's item sits in and the entry's sign."""

    coordinate: int
    chunk: int
    sign: int

    def payload(self, b: int) -> int:
        """``b``-bit integer: chunk index in the high ``b-1`` bits, sign bit last."""
        return (self.chunk << 1) | (self.sign > 0)


@dataclass(frozen=True)
class FreqEstimate:
    estimate: np.ndarray
    calibration: NoiseCalibration | None
    stats: TranscriptStats


@dataclass(frozen=True)
class RhrShape:
    """Chunking of a power-of-two domain for a ``b``-bit report."""

    d: int
    b: int

    def __post_init__(self):
        if not is_power_of_two(self.d):
            raise DimensionError(f"domain size must be a power of two, got {self.d}")
        if self.b < 1:
            raise ConfigError(f"need at least one bit per report, got b={self.b}")
        if 2 ** (self.b - 1) > self.d:
            raise ConfigError(f"b={self.b} bits give more chunks than items (d={self.d}); use b <= log2(d) + 1")

    @property
    def chunks(self) -> int:
        return 2 ** (self.b - 1)

    @property
    def B(self) -> int:
        return self.d // self.chunks


def pad_domain(d: int) -> int:
    """Power-of-two domain size holding ``d`` symbols; extra symbols never occur."""
    return next_power_of_two(d)


def rhr_report_for(item: OneHotItem, b: int, row: int) -> RhrReport:
    """The report ``item`` produces when row ``row`` is sampled."""
    shape = RhrShape(item.d, b)
    if not 0 <= row < shape.B:
        raise OutOfRangeError(f"row {row} outside [0, {shape.B})")
    chunk, offset = divmod(item.index, shape.B)
    return RhrReport(row, chunk, int(hadamard_sign(row, offset)))


def rhr_client_encode(item: OneHotItem, b: int, shared_seed: int, client: int) -> list[RhrReport]:
    shape = RhrShape(item.d, b)
    B = shape.B
    chunk, offset = divmod(item.index, B)
    rows = np.flatnonzero(shared_uniform_row(shared_seed, client, B) < 1 / B)
    signs = hadamard_sign(rows, offset)
    return [RhrReport(int(j), chunk, int(s)) for j, s in zip(rows, signs)]


def _finish(counts: np.ndarray, shape: RhrShape, n: int, sigma2: float, noise_rng, messages: int, cal) -> FreqEstimate:
    B = shape.B
    noise = noise_rng.standard_normal(counts.shape)
    cells = (B / n) * counts / math.sqrt(B) + math.sqrt(sigma2 / B) * noise
    estimate = fwht(cells).reshape(shape.d)
    if cal is None:
        eps, delta = math.inf, 0.0
    else:
        closed, rdp = audit_calibration(cal)
        eps, delta = (closed if cal.method == "closed-form" else rdp), cal.target.delta
    stats = TranscriptStats.from_counts(messages * shape.b, messages, n, accounted_eps=eps, accounted_delta=delta)
    return FreqEstimate(estimate, cal, stats)


def rhr_aggregate(
    reports: Iterable[Sequence[RhrReport]],
    n: int,
    d: int,
    b: int,
    sigma2: float,
    noise_rng: np.random.Generator,
    calibration: NoiseCalibration | None = None,
) -> FreqEstimate:
    """Server side: ``reports`` holds one list of RhrReport per client."""
    shape = RhrShape(d, b)
    counts = np.zeros((shape.chunks, shape.B), dtype=np.int64)
    messages = 0
    for client_reports in reports:
        for rep in client_reports:
            if not (0 <= rep.coordinate < shape.B and 0 <= rep.chunk < shape.chunks and rep.sign in (-1, 1)):
                raise ProtocolViolation(f"malformed report {rep} for B={shape.B}, {shape.chunks} chunks")
            counts[rep.chunk, rep.coordinate] += rep.sign
            messages += 1
    return _finish(counts, shape, n, sigma2, noise_rng, messages, calibration)


def _counts(items: np.ndarray, mask: np.ndarray, shape: RhrShape) -> np.ndarray:
    """Signed cell counts; ``mask`` has shape (..., n, B)."""
    B = shape.B
    chunk, offset = np.divmod(items, B)
    signs = hadamard_sign(np.arange(B)[None, :], offset[:, None])  # (n, B)
    contrib = np.where(mask, signs, 0)
    # scatter each client's row into its chunk; one-hot over chunks keeps it vectorised
    onehot = np.zeros((items.size, shape.chunks), dtype=np.int64)
    onehot[np.arange(items.size), chunk] = 1
    return np.einsum("...nj,nl->...lj", contrib, onehot)


def _item_array(items) -> tuple[np.ndarray, int]:
    if isinstance(items, np.ndarray):
        raise TypeError("pass OneHotItem objects, or use rhr_run_indices for raw indices")
    items = list(items)
    if not items:
        raise DimensionError("need at least one client")
    d = items[0].d
    if any(it.d != d for it in items):
        raise DimensionError("all items must share one domain size")
    return np.array([it.index for it in items], dtype=np.int64), d


# --------------------------------------------------------------------------
# sensitivity and calibration
# --------------------------------------------------------------------------


def rhr_sensitivity(n: int, d: int, b: int, relation: str = "add_remove") -> float:
    """Largest l2 change of one row's cells between neighbouring datasets.

    Measured on the unnormalised ``+-1`` scale, for a fixed sampling pattern
    with the differing client sampled.  The aggregate is linear in the
    clients, so the search runs over the differing client's item (or the
    pair of items for ``replace_one``) and every row.
    """
    shape = RhrShape(d, b)
    B = shape.B

    def contribution(t: int, j: int) -> np.ndarray:
        v = np.zeros(shape.chunks)
        chunk, offset = divmod(t, B)
        v[chunk] = (B / n) * hadamard_sign(j, offset)
        return v

    worst = 0.0
    for j in range(B):
        if relation == "add_remove":
            for t in range(d):
                worst = max(worst, float(np.linalg.norm(contribution(t, j))))
        elif relation == "replace_one":
            for t, u in itertools.product(range(d), repeat=2):
                worst = max(worst, float(np.linalg.norm(contribution(t, j) - contribution(u, j))))
        else:
            raise ValueError(f"unknown neighbouring relation {relation!r}")
    return worst


def rhr_effective_sensitivity(n: int, d: int, b: int, relation: str = "add_remove") -> float:
    """``max(B/n, verified sensitivity)``; never smaller than the nominal value."""
    shape = RhrShape(d, b)
    return max(shape.B / n, rhr_sensitivity(n, d, b, relation))


def rhr_calibration(
    budget: PrivacyBudget, n: int, d: int, b: int, accounting: str = "closed-form", relation: str = "add_remove"
) -> NoiseCalibration:
    shape = RhrShape(d, b)
    delta_eff = rhr_effective_sensitivity(n, d, b, relation)
    return calibrate(budget, 1 / shape.B, shape.B, delta_eff, accounting, n=n)


def rhr_calibrate(budget: PrivacyBudget, n: int, d: int, b: int, accounting: str = "closed-form") -> float:
    """Per-cell noise variance on the unnormalised scale."""
    return rhr_calibration(budget, n, d, b, accounting).sigma2_sum


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------


def rhr_run_indices(
    items: np.ndarray,
    d: int,
    b: int,
    seeds: Seeds,
    sigma2: float,
    calibration: NoiseCalibration | None = None,
) -> FreqEstimate:
    """Fast path on raw item indices; identical to encoding plus aggregation."""
    shape = RhrShape(d, b)
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= d):
        raise OutOfRangeError(f"items must lie in [0, {d})")
    n = items.size
    mask = shared_uniform_rows(seeds.sampling, n, shape.B) < 1 / shape.B
    counts = _counts(items, mask, shape)
    noise_rng = np.random.Generator(np.random.PCG64(seeds.noise))
    return _finish(counts, shape, n, sigma2, noise_rng, int(mask.sum()), calibration)


def rhr_run(
    items: Sequence[OneHotItem],
    budget: PrivacyBudget,
    b: int,
    seeds: Seeds,
    *,
    private: bool = True,
    accounting: str = "closed-form",
    calibration: NoiseCalibration | None = None,
) -> FreqEstimate:
    """Full pipeline: calibration, client reports, aggregation and inversion."""
    idx, d = _item_array(items)
    n = idx.size
    cal = None
    if private:
        cal = calibration if calibration is not None else rhr_calibration(budget, n, d, b, accounting)
    return rhr_run_indices(idx, d, b, seeds, 0.0 if cal is None else cal.sigma2_sum, cal)


def histogram(items, d: int) -> np.ndarray:
    """Empirical frequency vector ``pi / n``."""
    idx = np.asarray([it.index for it in items] if not isinstance(items, np.ndarray) else items)
    return np.bincount(idx, minlength=d) / idx.size


def cell_variance(items, d: int, b: int, sigma2: float = 0.0) -> np.ndarray:
    """Exact per-coordinate variance of the estimate for fixed data."""
    shape = RhrShape(d, b)
    idx = np.asarray([it.index for it in items] if not isinstance(items, np.ndarray) else items)
    n = idx.size
    per_chunk = np.bincount(idx // shape.B, minlength=shape.chunks)
    return np.repeat(per_chunk * (1 - 1 / shape.B) / n**2, shape.B) + sigma2 / shape.B


def l2_error_bound(n: int, d: int, b: int, sigma2: float) -> float:
    """Upper bound ``B/n + d sigma2 / B`` on the expected squared l2 error."""
    B = RhrShape(d, b).B
    return B / n + d * sigma2 / B


def l1_error_bound(n: int, d: int, b: int, sigma2: float) -> float:
    B = RhrShape(d, b).B
    return math.sqrt(d * B / n + d**2 * sigma2 / B)


def simulate_rhr(
    items: np.ndarray, d: int, b: int, trials: int, rng: np.random.Generator, sigma2: float = 0.0
) -> np.ndarray:
    """``(trials, d)`` estimates for fixed items, masks and noise drawn from ``rng``."""
    shape = RhrShape(d, b)
    items = np.asarray(items, dtype=np.int64)
    n, B = items.size, shape.B
    out = []
    step = max(1, _CHUNK_ELEMS // (n * B))
    done = 0
    while done < trials:
        t = min(step, trials - done)
        mask = rng.random((t, n, B)) < 1 / B
        counts = _counts(items, mask, shape)
        noise = rng.standard_normal(counts.shape)
        cells = (B / n) * counts / math.sqrt(B) + math.sqrt(sigma2 / B) * noise
        out.append(fwht(cells).reshape(t, d))
        done += t
    return np.concatenate(out)
