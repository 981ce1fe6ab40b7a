"""Multi-round shuffled SQKR mean estimation.

In every round each client samples ``b0`` coordinates of its sign vector
uniformly with replacement and passes the ``b0``-bit sign string through
exact ``2^b0``-ary randomized response: the true string is kept with
probability ``e^eps0 / (e^eps0 + 2^b0 - 1)``, otherwise one of the other
``2^b0 - 1`` strings is sent, chosen uniformly.  A trusted shuffler permutes
the reports, the server debiases and averages.  Privacy comes from
amplification by shuffling, composed over ``T`` rounds.

The server-side estimate only sees post-shuffle reports; nothing in this
module hands the server a client index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .accountant import (
    PrivacyBudget,
    amplify_shuffle,
    compose_advanced,
    rdp_to_dp,
    shuffle_curve,
    shuffle_eps0_limit,
)
from .errors import DimensionError, InfeasibleError, OutOfRangeError, ProtocolViolation
from .mean_est import MeanEstimate
from .rng import Seeds, stream
from .stats import TranscriptStats
from .transforms import KashinFrame, SignVector, kashin_decode, kashin_encode, round_to_signs

ROUND_INDEX_BITS = 16
CLIENT_COUNT_BITS = 32
HEADER_BITS = ROUND_INDEX_BITS + CLIENT_COUNT_BITS

# smallest client count for which a b0 = 1 plan exists
MIN_CLIENTS = 31

_CHUNK_ELEMS = 1 << 22


def index_bits(d: int) -> int:
    """Bits needed to name a coordinate in ``[0, d)``."""
    if d < 1:
        raise DimensionError(f"dimension must be positive, got {d}")
    return (d - 1).bit_length()


def slot_bits(d: int) -> int:
    return index_bits(d) + 1


@dataclass(frozen=True)
class SqkrReport:
    """Sampled coordinates and the (randomized) sign sent for each."""

    coords: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        if np.shape(self.coords) != np.shape(self.positive) or np.ndim(self.coords) != 1:
            raise ProtocolViolation("a report needs one sign per sampled coordinate")

    @property
    def b0(self) -> int:
        return int(self.coords.size)

    def values(self, c: float) -> np.ndarray:
        return np.where(self.positive, c, -c)

    def bits(self, d: int) -> int:
        return self.b0 * slot_bits(d)

    def key(self) -> tuple:
        return tuple(int(j) for j in self.coords), tuple(bool(s) for s in self.positive)


@dataclass(frozen=True)
class ShufflePlan:
    """Round structure and per-round local budget of one shuffled execution.

    ``d`` is the dimension the clients sample from (the frame dimension when a
    Kashin frame is used).  ``accounted`` is ``None`` for purely local runs.
    """

    T: int
    eps0: float
    b0: int
    delta1: float
    delta2: float
    accounted: PrivacyBudget | None
    d: int
    method: str = "closed-form"

    def __post_init__(self):
        if self.T < 1 or self.b0 < 1:
            raise OutOfRangeError(f"need T >= 1 and b0 >= 1, got T={self.T}, b0={self.b0}")
        if not self.eps0 > 0:
            raise OutOfRangeError(f"eps0 must be positive, got {self.eps0}")

    @property
    def bits_per_client(self) -> int:
        return self.T * self.b0 * slot_bits(self.d)


# --------------------------------------------------------------------------
# local randomizer
# --------------------------------------------------------------------------


def keep_probability(eps0: float, b0: int) -> float:
    """Probability that randomized response keeps the true ``b0``-bit string."""
    if eps0 == math.inf:
        return 1.0
    return 1.0 / (1.0 + math.expm1(b0 * math.log(2)) * math.exp(-eps0))


def debias_factor(eps0: float, b0: int) -> float:
    """``(e^eps0 + 2^b0 - 1) / (e^eps0 - 1)``; equals 1 without privacy."""
    if eps0 == math.inf:
        return 1.0
    if not eps0 > 0:
        raise OutOfRangeError(f"eps0 must be positive, got {eps0}")
    return 1.0 + 2.0**b0 / math.expm1(eps0)


def _nonzero_strings(shape: tuple[int, ...], b0: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-zero ``b0``-bit strings, one per leading index (rejection sampling)."""
    flips = rng.random(shape + (b0,)) < 0.5
    zero = ~flips.any(axis=-1)
    while zero.any():
        flips[zero] = rng.random((int(zero.sum()), b0)) < 0.5
        zero = ~flips.any(axis=-1)
    return flips


def randomize_signs(
    positive: np.ndarray,
    eps0: float,
    b0: int,
    sample_rng: np.random.Generator,
    rr_rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched randomizer over the last axis of ``positive`` (shape (..., d)).

    Returns ``coords`` and the sent signs, each of shape ``(..., b0)``.
    Coordinates come from ``sample_rng``; the randomized-response coins
    from ``rr_rng``.
    """
    if b0 < 1:
        raise OutOfRangeError(f"b0 must be >= 1, got {b0}")
    positive = np.asarray(positive, dtype=bool)
    lead, d = positive.shape[:-1], positive.shape[-1]
    coords = sample_rng.integers(0, d, size=lead + (b0,))
    truth = np.take_along_axis(positive, coords, axis=-1)
    keep = rr_rng.random(lead) < keep_probability(eps0, b0)
    flips = _nonzero_strings(lead, b0, rr_rng)
    sent = truth ^ (flips & ~keep[..., None])
    return coords, sent


def sqkr_randomize(x: SignVector, eps0: float, b0: int, rng: np.random.Generator) -> SqkrReport:
    """One client's report; coordinates and coins both drawn from ``rng``."""
    coords, sent = randomize_signs(x.positive, eps0, b0, rng, rng)
    return SqkrReport(coords, sent)


def shuffle_round(reports: Sequence[SqkrReport], rng: np.random.Generator) -> list[SqkrReport]:
    """Reports reordered by one uniform permutation; contents untouched."""
    order = rng.permutation(len(reports))
    return [reports[k] for k in order]


def _signed_counts(coords: np.ndarray, positive: np.ndarray, d: int) -> np.ndarray:
    """Exact integer sums of +-1 per coordinate over the last two axes."""
    lead = coords.shape[:-2]
    t = int(np.prod(lead, dtype=np.int64))
    flat = coords.reshape(t, -1) + d * np.arange(t)[:, None]
    weights = np.where(positive, 1, -1).reshape(t, -1)
    counts = np.bincount(flat.ravel(), weights=weights.ravel(), minlength=t * d)
    return np.rint(counts).astype(np.int64).reshape(lead + (d,))


def sqkr_estimate(reports: Sequence[SqkrReport], eps0: float, b0: int, n: int, d: int, c: float) -> np.ndarray:
    """Debiased per-round mean estimate from shuffled reports."""
    if n < 1 or not reports:
        raise ProtocolViolation("cannot estimate from an empty round")
    coords = np.stack([r.coords for r in reports])
    positive = np.stack([r.positive for r in reports])
    if coords.shape != (len(reports), b0):
        raise ProtocolViolation(f"every report must carry exactly b0={b0} slots")
    if coords.min() < 0 or coords.max() >= d:
        raise ProtocolViolation(f"coordinate outside [0, {d})")
    return _round_estimate(_signed_counts(coords, positive, d), eps0, b0, n, d, c)


def _round_estimate(counts, eps0, b0, n, d, c) -> np.ndarray:
    return (d / (n * b0)) * debias_factor(eps0, b0) * c * counts


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------


def rounds_for_budget(b: int, d: int, b0: int = 1) -> int:
    return int(b) // (b0 * slot_bits(d))


def _bisect_eps0(total, target_eps: float, limit: float, tol: float) -> float:
    if total(limit) <= target_eps:
        return limit
    lo, hi = 0.0, limit
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if total(mid) <= target_eps:
            lo = mid
        else:
            hi = mid
    if lo == 0.0:
        raise InfeasibleError("no positive eps0 meets the target")
    return lo


def plan_shuffled_sqkr(
    target: PrivacyBudget,
    b: int,
    d: int,
    n: int,
    *,
    b0: int = 1,
    accounting: str = "closed-form",
    tol: float = 1e-9,
) -> ShufflePlan:
    """Rounds and local budget so ``T`` shuffled rounds meet ``target`` in ``b`` bits.

    ``T = floor(b / (b0 (ceil(log2 d) + 1)))``.  The closed-form planner
    splits delta as ``delta/(2T)`` per round plus ``delta/2`` for advanced
    composition; the RDP planner composes the shuffle RDP bound over ``T``
    rounds and converts at ``delta``.  ``eps0`` is the largest value up to
    ``min(1, ln(n / (16 ln(2/delta1))))`` that keeps the total at or below
    ``target.eps`` (bisection to ``tol``).
    """
    if n < MIN_CLIENTS:
        raise InfeasibleError(f"shuffled SQKR needs n > 30 clients, got n={n}")
    T = rounds_for_budget(b, d, b0)
    if T == 0:
        raise InfeasibleError(f"b={b} bits cannot carry one round of {b0} slot(s) of {slot_bits(d)} bits")
    eps, delta = target.eps, target.delta
    if accounting == "closed-form":
        delta1, delta2 = delta / (2 * T), delta / 2
        limit = shuffle_eps0_limit(n, delta1)
        if not limit > 0:
            raise InfeasibleError(f"ln(n / (16 ln(2/delta1))) <= 0 for n={n}, delta1={delta1:.3g}")

        def total(e0):
            return compose_advanced(amplify_shuffle(e0, n, delta1), delta1, T, delta2).eps

        eps0 = _bisect_eps0(total, eps, limit, tol)
        accounted = compose_advanced(amplify_shuffle(eps0, n, delta1), delta1, T, delta2)
    elif accounting == "rdp":
        delta1, delta2 = 0.0, delta

        def total(e0):
            return rdp_to_dp(shuffle_curve(e0, n).scaled(T), delta)

        eps0 = _bisect_eps0(total, eps, 1.0, tol)
        accounted = PrivacyBudget(total(eps0), delta)
    else:
        raise ValueError(f"unknown accounting method {accounting!r}")
    return ShufflePlan(T, eps0, b0, delta1, delta2, accounted, d, accounting)


def local_plan(eps0: float, b: int, d: int, b0: int = 1) -> ShufflePlan:
    """Single round at local budget ``eps0`` with no shuffling credit."""
    if rounds_for_budget(b, d, b0) < 1:
        raise InfeasibleError(f"b={b} bits cannot carry one slot of {slot_bits(d)} bits")
    return ShufflePlan(1, eps0, b0, 0.0, 0.0, None, d, "local")


def plan_budget(plan: ShufflePlan, n: int) -> tuple[float, float]:
    """``(closed_form_eps, rdp_eps)`` of a plan, at the plan's total delta."""
    if plan.accounted is None:
        return plan.eps0, plan.eps0
    delta = plan.T * plan.delta1 + plan.delta2
    try:
        d1 = delta / (2 * plan.T)
        closed = compose_advanced(amplify_shuffle(plan.eps0, n, d1), d1, plan.T, delta / 2).eps
    except InfeasibleError:
        closed = math.inf
    rdp = rdp_to_dp(shuffle_curve(plan.eps0, n).scaled(plan.T), delta)
    return closed, rdp


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------


def _uint_bits(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((np.asarray(values, dtype=np.uint64)[..., None] >> shifts) & 1).astype(bool)


def encode_round(reports: Sequence[SqkrReport], round_index: int, d: int) -> bytes:
    """Big-endian bit-packed round: 16-bit round index, 32-bit client count, then slots.

    Each slot is the coordinate in ``ceil(log2 d)`` bits followed by one sign
    bit (1 for ``+c``).  The stream is zero-padded to whole bytes.
    """
    if not 0 <= round_index < 2**ROUND_INDEX_BITS or len(reports) >= 2**CLIENT_COUNT_BITS:
        raise OutOfRangeError("round index or client count does not fit the header")
    width = index_bits(d)
    parts = [_uint_bits(np.array([round_index]), ROUND_INDEX_BITS).ravel(), _uint_bits(np.array([len(reports)]), CLIENT_COUNT_BITS).ravel()]
    for rep in reports:
        if rep.coords.size and (rep.coords.min() < 0 or rep.coords.max() >= d):
            raise ProtocolViolation(f"coordinate outside [0, {d})")
        slots = np.concatenate([_uint_bits(rep.coords, width), rep.positive[:, None]], axis=1)
        parts.append(slots.ravel())
    return np.packbits(np.concatenate(parts)).tobytes()


def decode_round(data: bytes, b0: int, d: int) -> tuple[int, list[SqkrReport]]:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if bits.size < HEADER_BITS:
        raise ProtocolViolation("truncated round header")
    weights16 = 1 << np.arange(ROUND_INDEX_BITS - 1, -1, -1, dtype=np.uint64)
    weights32 = 1 << np.arange(CLIENT_COUNT_BITS - 1, -1, -1, dtype=np.uint64)
    round_index = int(bits[:ROUND_INDEX_BITS].astype(np.uint64) @ weights16)
    count = int(bits[ROUND_INDEX_BITS:HEADER_BITS].astype(np.uint64) @ weights32)
    width = index_bits(d)
    per_report = b0 * (width + 1)
    body = bits[HEADER_BITS:]
    if body.size < count * per_report or body.size - count * per_report >= 8:
        raise ProtocolViolation("payload length does not match the header")
    slots = body[: count * per_report].reshape(count, b0, width + 1).astype(np.uint64)
    coords = slots[..., :width] @ (1 << np.arange(width - 1, -1, -1, dtype=np.uint64)) if width else np.zeros((count, b0), np.uint64)
    if coords.size and coords.max() >= d:
        raise ProtocolViolation(f"decoded coordinate outside [0, {d})")
    reports = [SqkrReport(coords[i].astype(np.int64), slots[i, :, width].astype(bool)) for i in range(count)]
    return round_index, reports


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------


def _round_streams(seeds: Seeds, k: int):
    return stream(seeds.sampling, "round", k), stream(seeds.rr, "round", k), stream(seeds.permutation, "round", k)


def sqkr_protocol_round(
    positive: np.ndarray, plan: ShufflePlan, c: float, seeds: Seeds, k: int
) -> tuple[list[SqkrReport], np.ndarray]:
    """Round ``k`` through the message-level API; returns the shuffled reports and the estimate."""
    sample_rng, rr_rng, perm_rng = _round_streams(seeds, k)
    n, d = positive.shape
    coords, sent = randomize_signs(positive, plan.eps0, plan.b0, sample_rng, rr_rng)
    reports = [SqkrReport(coords[i], sent[i]) for i in range(n)]
    shuffled = shuffle_round(reports, perm_rng)
    return shuffled, sqkr_estimate(shuffled, plan.eps0, plan.b0, n, d, c)


def shuffled_sqkr_run(
    x,
    C: float,
    plan: ShufflePlan,
    frame: KashinFrame,
    seeds: Seeds,
) -> MeanEstimate:
    """Kashin encoding and rounding, ``T`` shuffled SQKR rounds, averaging, decoding.

    Every round draws fresh coordinates, coins and permutation from streams
    derived from ``(seeds, round)``, so rounds can be evaluated in any order.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError("expected an (n, d) array of client vectors")
    if plan.d != frame.D:
        raise DimensionError(f"plan samples from dimension {plan.d} but the frame has D={frame.D}")
    n, d = x.shape
    xt = kashin_encode(x, frame, bound=C)
    c = frame.level * C / math.sqrt(frame.D)
    positive = round_to_signs(xt, c, np.random.Generator(np.random.PCG64(seeds.rounding)))
    total = np.zeros(frame.D, dtype=np.int64)
    for k in range(plan.T):
        sample_rng, rr_rng, perm_rng = _round_streams(seeds, k)
        coords, sent = randomize_signs(positive, plan.eps0, plan.b0, sample_rng, rr_rng)
        order = perm_rng.permutation(n)
        total += _signed_counts(coords[order], sent[order], frame.D)
    mean_D = _round_estimate(total, plan.eps0, plan.b0, n, frame.D, c) / plan.T
    bits = n * plan.bits_per_client
    if plan.accounted is None:
        eps, delta = plan.eps0, 0.0
    else:
        eps, delta = plan.accounted.eps, plan.accounted.delta
    stats = TranscriptStats.from_counts(
        bits, n * plan.T, n, accounted_eps=eps, accounted_delta=delta, overhead_bits=plan.T * HEADER_BITS
    )
    return MeanEstimate(kashin_decode(mean_D, frame)[:d], None, stats)


def simulate_shuffled_sqkr(
    x,
    C: float,
    frame: KashinFrame,
    eps0: float,
    b0: int,
    T: int,
    trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``(trials, d)`` estimates for fixed data; all randomness from ``rng``.

    The shuffle is omitted: the estimate is invariant to the report order.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    D = frame.D
    xt = kashin_encode(x, frame, bound=C)
    c = frame.level * C / math.sqrt(D)
    out = []
    step = max(1, _CHUNK_ELEMS // (n * (D + 2 * T * b0)))
    done = 0
    while done < trials:
        t = min(step, trials - done)
        positive = round_to_signs(np.broadcast_to(xt, (t, n, D)), c, rng)
        total = np.zeros((t, D), dtype=np.int64)
        for _ in range(T):
            coords, sent = randomize_signs(positive, eps0, b0, rng, rng)
            total += _signed_counts(coords, sent, D)
        mean_D = _round_estimate(total, eps0, b0, n, D, c) / T
        out.append(kashin_decode(mean_D, frame)[:, :d])
        done += t
    return np.concatenate(out)


def with_rounds(plan: ShufflePlan, T: int) -> ShufflePlan:
    """Same local budget with a different round count (accounting dropped)."""
    return replace(plan, T=T, accounted=None, method="manual")
