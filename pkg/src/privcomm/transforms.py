"""Walsh-Hadamard transform, Kashin representations and randomized rounding.

All transforms act on the last axis, so a stack of client vectors with shape
``(n, d)`` is processed in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, KashinConvergenceError, OutOfRangeError


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    if n < 1:
        raise DimensionError(f"dimension must be positive, got {n}")
    return 1 << (n - 1).bit_length()


def fwht(v) -> np.ndarray:
    """Orthonormal fast Walsh-Hadamard transform along the last axis.

    Computes ``H_B @ v`` for the Sylvester-ordered matrix defined by
    ``H_1 = [1]`` and ``H_2m = [[H_m, H_m], [H_m, -H_m]] / sqrt(2)``.  The
    matrix is symmetric and orthonormal, so ``fwht`` is its own inverse.
    Runs in ``O(B log B)``.
    """
    y = np.array(v, dtype=float)
    if y.ndim == 0:
        raise DimensionError("fwht needs at least one axis")
    B = y.shape[-1]
    if not is_power_of_two(B):
        raise DimensionError(f"fwht length must be a power of two, got {B}")
    lead = y.shape[:-1]
    h = 1
    while h < B:
        y = y.reshape(*lead, B // (2 * h), 2, h)
        a = y[..., 0, :]
        b = y[..., 1, :]
        y = np.stack((a + b, a - b), axis=-2)
        h *= 2
    return y.reshape(*lead, B) / math.sqrt(B)


def hadamard_sign(row, col):
    """Sign of the Sylvester Hadamard entry ``H[row, col]`` (+1 or -1)."""
    row = np.asarray(row, dtype=np.int64)
    col = np.asarray(col, dtype=np.int64)
    parity = np.bitwise_count(row & col) & 1
    return 1 - 2 * parity.astype(np.int64)


@dataclass(frozen=True)
class SignVector:
    """Vector in ``{-c, +c}^dim`` stored as packed bits (bit set means ``+c``)."""

    bits: np.ndarray
    c: float
    dim: int

    def __post_init__(self):
        if not self.c > 0:
            raise OutOfRangeError(f"magnitude c must be positive, got {self.c}")
        if self.bits.dtype != np.uint8 or self.bits.size != (self.dim + 7) // 8:
            raise DimensionError("packed bit buffer does not match dim")

    @classmethod
    def from_signs(cls, positive, c: float) -> "SignVector":
        positive = np.asarray(positive, dtype=bool).ravel()
        return cls(np.packbits(positive), float(c), positive.size)

    @classmethod
    def from_values(cls, values, c: float) -> "SignVector":
        values = np.asarray(values, dtype=float)
        if not np.all(np.abs(values) == c):
            raise OutOfRangeError("every entry of a sign vector must equal +c or -c")
        return cls.from_signs(values > 0, c)

    @property
    def positive(self) -> np.ndarray:
        return np.unpackbits(self.bits, count=self.dim).astype(bool)

    def values(self) -> np.ndarray:
        return np.where(self.positive, self.c, -self.c)

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True)
class KashinFrame:
    """Seeded Parseval frame ``K`` (``d x D``) built from a Hadamard matrix.

    ``K = diag(eta) @ H_D[:d, :] @ diag(xi)`` with ``xi`` in ``{-1, 1}^D`` and
    ``eta`` in ``{-1, 1}^d`` drawn from ``sign_seed``.  Rows of ``H_D`` are
    orthonormal, hence ``K @ K.T = I_d``.  Both ``K`` and ``K.T`` are applied
    through :func:`fwht` without storing the matrix.

    ``level`` is the multiplier ``L`` of the guaranteed bound
    ``||x_tilde||_inf <= L * ||x||_2 / sqrt(D)``.
    """

    d: int
    D: int
    sign_seed: int = 0
    level: float = 8.0
    iters: int = 30

    def __post_init__(self):
        if not is_power_of_two(self.d) or not is_power_of_two(self.D):
            raise DimensionError(f"frame dimensions must be powers of two, got d={self.d}, D={self.D}")
        if self.D < 2 * self.d:
            raise DimensionError(f"frame needs D >= 2d, got d={self.d}, D={self.D}")
        if not self.level > 0 or self.iters < 1:
            raise OutOfRangeError("level must be positive and iters >= 1")

    @classmethod
    def for_dimension(cls, d: int, sign_seed: int = 0, level: float = 8.0, iters: int = 30) -> "KashinFrame":
        """Frame for signal dimension ``d``; non powers of two are padded up."""
        dp = next_power_of_two(d)
        return cls(dp, 2 * dp, sign_seed, level, iters)

    @cached_property
    def _signs(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(self.sign_seed))
        xi = rng.choice(np.array([-1.0, 1.0]), size=self.D)
        eta = rng.choice(np.array([-1.0, 1.0]), size=self.d)
        return xi, eta

    def apply(self, xt) -> np.ndarray:
        """``K @ xt`` along the last axis (length D -> length d)."""
        xi, eta = self._signs
        return eta * fwht(np.asarray(xt, dtype=float) * xi)[..., : self.d]

    def adjoint(self, r) -> np.ndarray:
        """``K.T @ r`` along the last axis (length d -> length D)."""
        xi, eta = self._signs
        r = np.asarray(r, dtype=float)
        padded = np.zeros(r.shape[:-1] + (self.D,))
        padded[..., : self.d] = eta * r
        return xi * fwht(padded)

    def matrix(self) -> np.ndarray:
        """Dense ``d x D`` matrix; for tests and small problems only."""
        return self.apply(np.eye(self.D)).T


def _pad(x: np.ndarray, width: int) -> np.ndarray:
    if x.shape[-1] == width:
        return x
    if x.shape[-1] > width:
        raise DimensionError(f"vector of length {x.shape[-1]} does not fit a frame of dimension {width}")
    out = np.zeros(x.shape[:-1] + (width,))
    out[..., : x.shape[-1]] = x
    return out


def kashin_encode(x, frame: KashinFrame, bound: float | None = None, tol: float = 1e-9) -> np.ndarray:
    """Kashin representation of ``x`` (last axis) with respect to ``frame``.

    Returns ``xt`` of length ``frame.D`` with ``frame.apply(xt) == x`` up to a
    relative residual ``tol`` and ``|xt| <= frame.level * ||x||_2 / sqrt(D)``
    entrywise.  Inputs shorter than ``frame.d`` are zero-padded.

    The iteration is truncated frame projection: starting from ``xt = 0``,
    repeatedly add ``K.T @ (x - K @ xt)`` and clamp to the level.  Keeping the
    accumulated coefficients inside the box (rather than only each increment)
    makes the level a hard guarantee; when the clamp is inactive the first step
    is already exact.

    Raises :class:`KashinConvergenceError` if the residual is still above
    ``tol`` after ``frame.iters`` iterations, and :class:`OutOfRangeError` if
    ``bound`` is given and some ``||x||_2`` exceeds it.
    """
    x = _pad(np.asarray(x, dtype=float), frame.d)
    if not np.all(np.isfinite(x)):
        raise OutOfRangeError("Kashin encoding needs finite inputs")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if bound is not None and np.any(norms > bound * (1 + 1e-12)):
        raise OutOfRangeError(f"input norm {norms.max():.6g} exceeds declared bound {bound}")
    limit = frame.level * norms / math.sqrt(frame.D)
    scale = np.where(norms > 0, norms, 1.0)

    xt = np.zeros(x.shape[:-1] + (frame.D,))
    r = x
    worst = 0.0
    for _ in range(frame.iters):
        xt = np.clip(xt + frame.adjoint(r), -limit, limit)
        r = x - frame.apply(xt)
        worst = float(np.max(np.linalg.norm(r, axis=-1, keepdims=True) / scale, initial=0.0))
        if worst <= tol:
            return xt
    raise KashinConvergenceError(worst, frame.iters)


def kashin_decode(xt, frame: KashinFrame) -> np.ndarray:
    """``K @ xt``: the exact linear inverse of :func:`kashin_encode`."""
    xt = np.asarray(xt, dtype=float)
    if xt.shape[-1] != frame.D:
        raise DimensionError(f"expected length {frame.D}, got {xt.shape[-1]}")
    return frame.apply(xt)


def round_to_signs(xt, c: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean array, True where the unbiased rounding of ``xt`` picks ``+c``.

    Works on any shape.  Each entry is ``+c`` with probability
    ``(xt + c) / (2c)`` independently.
    """
    if not c > 0:
        raise OutOfRangeError(f"rounding magnitude must be positive, got {c}")
    xt = np.asarray(xt, dtype=float)
    # tolerance only absorbs last-bit rounding in the Kashin level computation
    if np.any(np.abs(xt) > c * (1 + 1e-12)) or not np.all(np.isfinite(xt)):
        raise OutOfRangeError(f"entry of magnitude {np.abs(xt).max():.6g} exceeds rounding level {c:.6g}")
    p_plus = np.clip((xt + c) / (2 * c), 0.0, 1.0)
    return rng.random(xt.shape) < p_plus


def randomized_round(xt, c: float, rng: np.random.Generator) -> SignVector:
    """Unbiased rounding of a single vector with ``|xt| <= c`` to ``{-c, +c}``."""
    xt = np.asarray(xt, dtype=float)
    if xt.ndim != 1:
        raise DimensionError("randomized_round takes a single vector; use round_to_signs for batches")
    return SignVector.from_signs(round_to_signs(xt, c, rng), c)
