"""Privacy accounting.

Two independent routes are provided:

closed form
    Gaussian mechanism calibration, Poisson-subsampling amplification,
    advanced composition and the end-to-end chain that turns a target
    ``(eps, delta)`` into a per-coordinate noise variance.

Renyi DP
    Gaussian and Poisson-subsampled Gaussian RDP curves, additive
    composition, conversion to ``(eps, delta)``, and an RDP-based noise
    calibration.

Shuffle amplification is available in both forms.  Logarithms in privacy
formulas are natural logs throughout.  Neighbouring datasets differ by adding
or removing one client (equivalently, zeroing one client's contribution with
``n`` public); this is the relation under which the subsampling lemma and the
per-coordinate sensitivity ``c`` hold.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import InfeasibleError, OutOfRangeError

DEFAULT_ORDERS: tuple[float, ...] = (1.5,) + tuple(float(a) for a in range(2, 65)) + (96.0, 128.0, 256.0)

# ceiling just below 1 keeps the classic Gaussian bound inside its validity range
EPS1_CAP = 1.0 - 1e-9

# hidden constant of the RDP shuffling bound; conservative, not tight
RDP_SHUFFLE_CONSTANT = 8.0


@dataclass(frozen=True)
class PrivacyBudget:
    eps: float
    delta: float

    def __post_init__(self):
        if not self.eps > 0:
            raise OutOfRangeError(f"eps must be positive, got {self.eps}")
        if not 0 < self.delta < 1:
            raise OutOfRangeError(f"delta must lie in (0, 1), got {self.delta}")

    def within(self, other: "PrivacyBudget", rtol: float = 1e-12) -> bool:
        """Component-wise ``self <= other`` up to floating-point rounding."""
        return self.eps <= other.eps * (1 + rtol) and self.delta <= other.delta * (1 + rtol)


@dataclass(frozen=True)
class RdpCurve:
    """Renyi-DP guarantee sampled on a grid of orders; ``+inf`` means unbounded."""

    orders: tuple[float, ...]
    eps: tuple[float, ...]

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        eps = tuple(float(e) for e in self.eps)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "eps", eps)
        if len(orders) != len(eps):
            raise ValueError("orders and eps must have the same length")
        if any(a <= 1 for a in orders) or any(b <= a for a, b in zip(orders, orders[1:])):
            raise ValueError("orders must be strictly ascending and > 1")
        if any(not e >= 0 for e in eps):
            raise ValueError("RDP values must be non-negative")

    def __len__(self) -> int:
        return len(self.orders)

    def scaled(self, k: float) -> "RdpCurve":
        return RdpCurve(self.orders, tuple(k * e for e in self.eps))


@dataclass(frozen=True)
class NoiseCalibration:
    """Resolved Gaussian noise plus the intermediate budgets that justify it.

    ``sigma2_sum`` is the per-coordinate variance at sum scale (sensitivity
    ``sensitivity``).  The budgets ``eps1/delta1`` (per coordinate, before
    amplification) and ``eps2/delta2`` (after amplification) are only set by
    the closed-form chain.
    """

    sigma2_sum: float
    gamma: float
    coords: int
    sensitivity: float
    target: PrivacyBudget
    eps1: float | None = None
    delta1: float | None = None
    eps2: float | None = None
    delta2: float | None = None
    n: int | None = None
    method: str = "closed-form"

    @property
    def sigma2_mean(self) -> float:
        """Variance after normalizing the noisy sum by ``n * gamma``."""
        if self.n is None:
            raise ValueError("sigma2_mean needs the client count n")
        return self.sigma2_sum / (self.n * self.gamma) ** 2

    def with_n(self, n: int) -> "NoiseCalibration":
        return dataclasses.replace(self, n=n)


# --------------------------------------------------------------------------
# closed form
# --------------------------------------------------------------------------


def gaussian_sigma(sensitivity: float, budget: PrivacyBudget) -> float:
    """Variance ``Delta^2 * 2 ln(1.25/delta) / eps^2`` of the classic Gaussian mechanism.

    Valid for ``eps < 1`` only; larger values raise :class:`OutOfRangeError`
    (cap the per-coordinate budget below 1 instead).
    """
    if not sensitivity > 0:
        raise OutOfRangeError(f"sensitivity must be positive, got {sensitivity}")
    if budget.eps >= 1:
        raise OutOfRangeError(
            f"classic Gaussian calibration needs eps < 1, got {budget.eps}; cap the per-coordinate eps below 1"
        )
    return sensitivity**2 * 2.0 * math.log(1.25 / budget.delta) / budget.eps**2


def gaussian_eps(sensitivity: float, sigma2: float, delta: float, strict: bool = True) -> float:
    """Inverse of :func:`gaussian_sigma`: the eps matching a given variance.

    With ``strict`` (the default) values outside the lemma's range ``eps < 1``
    are reported as ``inf`` since they certify nothing.
    """
    eps = sensitivity * math.sqrt(2.0 * math.log(1.25 / delta) / sigma2)
    return eps if eps < 1 or not strict else math.inf


def amplify_poisson(eps: float, delta: float, gamma: float) -> PrivacyBudget:
    """Budget of a mechanism run on a Poisson subsample with rate ``gamma``."""
    if not 0 < gamma <= 1:
        raise OutOfRangeError(f"sampling rate must lie in (0, 1], got {gamma}")
    if gamma == 1:
        return PrivacyBudget(eps, delta)
    return PrivacyBudget(math.log1p(gamma * math.expm1(eps)), gamma * delta)


def compose_advanced(eps: float, delta: float, k: int, delta_tilde: float) -> PrivacyBudget:
    """Advanced composition of ``k`` adaptive ``(eps, delta)`` mechanisms."""
    if k < 1:
        raise OutOfRangeError(f"number of folds must be >= 1, got {k}")
    if not 0 < delta_tilde <= 1:
        raise OutOfRangeError(f"delta_tilde must lie in (0, 1], got {delta_tilde}")
    eps_total = k * eps * math.expm1(eps) + eps * math.sqrt(2 * k * math.log(1 / delta_tilde))
    return PrivacyBudget(eps_total, k * delta + delta_tilde)


def _eps2_closed_form(eps: float, delta: float, coords: int) -> float:
    s = 2 * coords * math.log(2 / delta)
    return min(1.0, (-math.sqrt(s) + math.sqrt(s + 8 * eps * coords)) / (4 * coords))


def _eps2_exact(eps: float, delta: float, coords: int) -> float:
    # largest e2 with advanced composition over `coords` folds <= eps (monotone in e2)
    root = math.sqrt(2 * coords * math.log(2 / delta))

    def total(e2):
        return coords * e2 * math.expm1(e2) + e2 * root

    lo, hi = 0.0, eps / root
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) <= eps:
            lo = mid
        else:
            hi = mid
    return lo


def calibrate_subsampled_gaussian(
    target: PrivacyBudget,
    gamma: float,
    coords: int,
    sensitivity: float,
    *,
    exact: bool = False,
    n: int | None = None,
) -> NoiseCalibration:
    """Per-coordinate noise for ``coords`` Poisson-subsampled Gaussian releases.

    The chain splits ``delta`` in half between the composition slack and the
    per-coordinate failures, solves the quadratic relaxation of advanced
    composition for the per-coordinate amplified budget ``eps2`` (kept
    ``<= 1``), inverts Poisson amplification exactly to get ``eps1`` and feeds
    ``(eps1, delta1)`` to the Gaussian mechanism.

    With ``exact=True`` the composition equation is solved by bisection
    instead of its quadratic relaxation, which gives a slightly larger
    ``eps2`` and thus less noise.
    """
    if coords < 1:
        raise OutOfRangeError(f"coords must be >= 1, got {coords}")
    if not 0 < gamma <= 1:
        raise OutOfRangeError(f"sampling rate must lie in (0, 1], got {gamma}")
    eps, delta = target.eps, target.delta
    delta2 = delta / (2 * coords)
    delta1 = delta2 / gamma
    if delta1 >= 1:
        raise InfeasibleError(
            f"per-coordinate delta1 = {delta1:.3g} >= 1: sampling rate {gamma:.3g} too small for delta {delta:.3g}"
        )
    eps2 = _eps2_exact(eps, delta, coords) if exact else _eps2_closed_form(eps, delta, coords)
    eps1 = min(EPS1_CAP, math.log1p(math.expm1(eps2) / gamma))
    sigma2 = gaussian_sigma(sensitivity, PrivacyBudget(eps1, delta1))
    return NoiseCalibration(
        sigma2_sum=sigma2,
        gamma=gamma,
        coords=coords,
        sensitivity=sensitivity,
        target=target,
        eps1=eps1,
        delta1=delta1,
        eps2=eps2,
        delta2=delta2,
        n=n,
        method="closed-form",
    )


def audit_subsampled_gaussian(
    sigma2_sum: float, gamma: float, coords: int, sensitivity: float, delta: float
) -> PrivacyBudget | None:
    """Forward closed-form chain for a given noise level; ``None`` if not certifiable.

    Uses the same delta split as :func:`calibrate_subsampled_gaussian`, then
    Gaussian mechanism -> Poisson amplification -> composition over
    ``coords`` folds.  The composition step takes the better of advanced and
    basic composition (both are valid bounds); for calibrations produced by the
    chain the result is never above the target.
    """
    delta2 = delta / (2 * coords)
    delta1 = delta2 / gamma
    if delta1 >= 1 or sigma2_sum <= 0:
        return None
    eps1 = gaussian_eps(sensitivity, sigma2_sum, delta1)
    if not math.isfinite(eps1):
        return None
    amp = amplify_poisson(eps1, delta1, gamma)
    adv = compose_advanced(amp.eps, amp.delta, coords, delta / 2)
    basic_eps = coords * amp.eps
    if basic_eps < adv.eps:
        return PrivacyBudget(basic_eps, min(coords * amp.delta + delta / 2, adv.delta))
    return adv


# --------------------------------------------------------------------------
# Renyi DP
# --------------------------------------------------------------------------


def rdp_gaussian(sensitivity: float, sigma: float, alpha: float) -> float:
    """RDP of the Gaussian mechanism: ``alpha * Delta^2 / (2 sigma^2)``."""
    return alpha * sensitivity**2 / (2 * sigma**2)


def _log_binom(alpha: int, k: np.ndarray) -> np.ndarray:
    return gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)


def rdp_subsampled_gaussian(gamma: float, noise_multiplier: float, alpha: int) -> float:
    """RDP at integer order ``alpha`` of the Poisson-subsampled Gaussian mechanism.

    Evaluates ``log(sum_k C(a,k) (1-g)^(a-k) g^k exp(k(k-1)/(2 z^2))) / (a-1)``
    in log space.  Returns ``inf`` if even the log-space sum overflows.
    """
    if int(alpha) != alpha or alpha < 2:
        raise OutOfRangeError(f"order must be an integer >= 2, got {alpha}")
    alpha = int(alpha)
    if not 0 <= gamma <= 1:
        raise OutOfRangeError(f"sampling rate must lie in [0, 1], got {gamma}")
    if gamma == 0:
        return 0.0
    z2 = noise_multiplier**2
    if gamma == 1:
        return alpha / (2 * z2)
    k = np.arange(alpha + 1, dtype=float)
    with np.errstate(over="ignore"):
        terms = _log_binom(alpha, k) + (alpha - k) * math.log1p(-gamma) + k * math.log(gamma) + k * (k - 1) / (2 * z2)
    log_a = float(logsumexp(terms))
    if not math.isfinite(log_a):
        return math.inf
    return max(0.0, log_a / (alpha - 1))


def _order_for_subsampled(alpha: float) -> int:
    # fractional orders are bounded by the next integer order (RDP is non-decreasing in alpha)
    return max(2, math.ceil(alpha))


def subsampled_gaussian_curve(
    gamma: float, noise_multiplier: float, orders: Sequence[float] = DEFAULT_ORDERS
) -> RdpCurve:
    if gamma == 1:
        return RdpCurve(tuple(orders), tuple(rdp_gaussian(1.0, noise_multiplier, a) for a in orders))
    cache: dict[int, float] = {}
    eps = []
    for a in orders:
        ia = _order_for_subsampled(a)
        if ia not in cache:
            cache[ia] = rdp_subsampled_gaussian(gamma, noise_multiplier, ia)
        eps.append(cache[ia])
    return RdpCurve(tuple(orders), tuple(eps))


def rdp_to_dp(curve: RdpCurve, delta: float) -> float:
    """Smallest ``eps(alpha) + ln(1/delta)/(alpha-1)`` over the curve's orders."""
    if len(curve) == 0:
        raise ValueError("cannot convert an empty RDP curve")
    if not 0 < delta < 1:
        raise OutOfRangeError(f"delta must lie in (0, 1), got {delta}")
    log_inv = math.log(1 / delta)
    return min(e + log_inv / (a - 1) for a, e in zip(curve.orders, curve.eps))


def rdp_compose(curves: Sequence[RdpCurve]) -> RdpCurve:
    """Order-wise sum of RDP curves sharing one grid."""
    if not curves:
        raise ValueError("nothing to compose")
    grid = curves[0].orders
    for c in curves[1:]:
        if c.orders != grid:
            raise ValueError("RDP curves are sampled on different order grids")
    return RdpCurve(grid, tuple(float(sum(vals)) for vals in zip(*(c.eps for c in curves))))


def rdp_subsampled_gaussian_eps(
    gamma: float,
    noise_multiplier: float,
    coords: int,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """``(eps, delta)`` of ``coords`` composed subsampled Gaussians via RDP."""
    return rdp_to_dp(subsampled_gaussian_curve(gamma, noise_multiplier, orders).scaled(coords), delta)


def calibrate_rdp_subsampled_gaussian(
    target: PrivacyBudget,
    gamma: float,
    coords: int,
    sensitivity: float,
    *,
    orders: Sequence[float] = DEFAULT_ORDERS,
    n: int | None = None,
    rtol: float = 1e-10,
) -> NoiseCalibration:
    """Smallest noise whose RDP-accounted budget is at or below ``target``.

    Bisection on the noise multiplier in log space; the returned value is the
    upper end of the final bracket, so it always satisfies the target.
    """
    if coords < 1:
        raise OutOfRangeError(f"coords must be >= 1, got {coords}")
    if not 0 < gamma <= 1:
        raise OutOfRangeError(f"sampling rate must lie in (0, 1], got {gamma}")

    def eps_at(z):
        return rdp_subsampled_gaussian_eps(gamma, z, coords, target.delta, orders)

    lo, hi = 1e-3, 1.0
    while eps_at(hi) > target.eps:
        lo, hi = hi, hi * 4
        if hi > 1e12:
            raise InfeasibleError("no finite noise level reaches the target under RDP accounting")
    if eps_at(lo) <= target.eps:
        raise InfeasibleError("target budget is met at vanishing noise; RDP grid too coarse")
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target.eps:
            hi = mid
        else:
            lo = mid
    return NoiseCalibration(
        sigma2_sum=(hi * sensitivity) ** 2,
        gamma=gamma,
        coords=coords,
        sensitivity=sensitivity,
        target=target,
        n=n,
        method="rdp",
    )


def calibrate(
    target: PrivacyBudget,
    gamma: float,
    coords: int,
    sensitivity: float,
    accounting: str = "closed-form",
    n: int | None = None,
) -> NoiseCalibration:
    """Dispatch to the closed-form chain or the RDP calibration."""
    if accounting == "closed-form":
        return calibrate_subsampled_gaussian(target, gamma, coords, sensitivity, n=n)
    if accounting == "rdp":
        return calibrate_rdp_subsampled_gaussian(target, gamma, coords, sensitivity, n=n)
    raise ValueError(f"unknown accounting method {accounting!r}")


# --------------------------------------------------------------------------
# shuffling
# --------------------------------------------------------------------------


def shuffle_eps0_limit(n: int, delta: float) -> float:
    """Largest local budget the shuffling bound admits: ``min(1, ln(n / (16 ln(2/delta))))``."""
    arg = n / (16 * math.log(2 / delta))
    return min(1.0, math.log(arg)) if arg > 0 else -math.inf


def amplify_shuffle(eps0: float, n: int, delta: float) -> float:
    """Central eps after shuffling ``n`` reports of an ``eps0``-LDP randomizer.

    Closed-form amplification-by-shuffling bound
    ``ln(1 + (e^eps0 - 1) (4 sqrt(2 ln(4/delta)) / sqrt((e^eps0 + 1) n) + 4/n))``.
    """
    if not eps0 > 0:
        raise OutOfRangeError(f"eps0 must be positive, got {eps0}")
    if not 0 < delta < 1:
        raise OutOfRangeError(f"delta must lie in (0, 1), got {delta}")
    bound = math.log(n / (16 * math.log(2 / delta))) if n > 0 else -math.inf
    if eps0 > bound:
        raise InfeasibleError(f"eps0 = {eps0:.6g} exceeds ln(n / (16 ln(2/delta))) = {bound:.6g}")
    if eps0 > 1:
        raise InfeasibleError(f"eps0 = {eps0:.6g} exceeds 1, outside the shuffling lemma")
    e = math.exp(eps0)
    inner = 4 * math.sqrt(2 * math.log(4 / delta)) / math.sqrt((e + 1) * n) + 4 / n
    return math.log1p(math.expm1(eps0) * inner)


def rdp_shuffle_max_order(eps0: float, n: int) -> float:
    return n / (16 * eps0 * math.exp(eps0))


def rdp_shuffle(eps0: float, n: int, alpha: float) -> float:
    """RDP of one shuffled round of ``eps0``-LDP reports (constant fixed at 8).

    Valid for ``alpha < n / (16 eps0 e^eps0)``.  This is an upper bound with a
    conservative constant, not a tight value.
    """
    if alpha >= rdp_shuffle_max_order(eps0, n) or alpha <= 1:
        raise OutOfRangeError(f"order {alpha} outside the valid range (1, {rdp_shuffle_max_order(eps0, n):.6g})")
    return RDP_SHUFFLE_CONSTANT * alpha * (-math.expm1(-eps0)) ** 2 * math.exp(eps0) / n


def shuffle_curve(eps0: float, n: int, orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """RDP curve of one shuffled round; orders outside the valid range are ``inf``."""
    limit = rdp_shuffle_max_order(eps0, n)
    return RdpCurve(tuple(orders), tuple(rdp_shuffle(eps0, n, a) if a < limit else math.inf for a in orders))


@dataclass
class RdpAccountant:
    """Running RDP ledger over a fixed order grid."""

    orders: tuple[float, ...] = DEFAULT_ORDERS
    _eps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._eps = np.zeros(len(self.orders))

    def compose(self, curve: RdpCurve, times: int = 1) -> "RdpAccountant":
        if curve.orders != tuple(self.orders):
            raise ValueError("curve grid does not match the accountant grid")
        self._eps = self._eps + times * np.asarray(curve.eps)
        return self

    @property
    def curve(self) -> RdpCurve:
        return RdpCurve(tuple(self.orders), tuple(self._eps))

    def epsilon(self, delta: float) -> float:
        return rdp_to_dp(self.curve, delta)


@functools.lru_cache(maxsize=1024)
def audit_calibration(cal: NoiseCalibration) -> tuple[float, float]:
    """``(closed_form_eps, rdp_eps)`` certified by the noise actually used.

    Both are evaluated at ``cal.target.delta``.  The closed-form value is
    ``inf`` when the noise is too small for the classic Gaussian lemma.
    Cached, since every trial of a sweep point reports the same calibration.
    """
    delta = cal.target.delta
    if cal.sigma2_sum <= 0:
        return math.inf, math.inf
    audit = audit_subsampled_gaussian(cal.sigma2_sum, cal.gamma, cal.coords, cal.sensitivity, delta)
    closed = audit.eps if audit is not None else math.inf
    z = math.sqrt(cal.sigma2_sum) / cal.sensitivity
    rdp = rdp_subsampled_gaussian_eps(cal.gamma, z, cal.coords, delta)
    return closed, rdp
