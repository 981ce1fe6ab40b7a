"""Seeded random streams.

Every randomized operation in the package takes its stream explicitly.  Two
helpers matter for the protocols:

* :func:`derive_seed` turns ``(master, labels...)`` into an independent 64-bit
  seed with a keyed hash, so trial ``k`` of a sweep always sees the same
  randomness no matter how trials are scheduled.
* :func:`shared_uniform_row` / :func:`shared_uniform_rows` implement the
  public-coin sampling masks.  Row ``i`` of the uniform matrix drawn from
  ``PCG64(seed)`` is reproducible on its own by jumping the generator ahead
  ``i * width`` draws, so a client and the server derive byte-identical masks
  while simulations can still draw all rows in one call.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *labels: object) -> int:
    """Keyed BLAKE2b hash of ``labels`` under ``master``, truncated to 64 bits."""
    key = (int(master) & _MASK64).to_bytes(8, "little")
    h = hashlib.blake2b(digest_size=8, key=key)
    h.update("\x1f".join(str(lab) for lab in labels).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))


def shared_uniform_rows(seed: int, n_rows: int, width: int) -> np.ndarray:
    """All rows ``0..n_rows-1`` of the shared uniform matrix, shape (n_rows, width)."""
    return np.random.Generator(np.random.PCG64(seed)).random((n_rows, width))


def shared_uniform_row(seed: int, row: int, width: int) -> np.ndarray:
    # one float64 from Generator.random consumes exactly one 64-bit output
    bitgen = np.random.PCG64(seed)
    bitgen.advance(row * width)
    return np.random.Generator(bitgen).random(width)


@dataclass(frozen=True)
class Seeds:
    """Independent seeds for the random streams of one protocol execution."""

    sampling: int
    noise: int
    rounding: int = 0
    selection: int = 0
    rr: int = 0
    permutation: int = 0

    @classmethod
    def derive(cls, master: int, trial: int = 0) -> "Seeds":
        return cls(
            sampling=derive_seed(master, trial, "sampling"),
            noise=derive_seed(master, trial, "noise"),
            rounding=derive_seed(master, trial, "rounding"),
            selection=derive_seed(master, trial, "selection"),
            rr=derive_seed(master, trial, "rr"),
            permutation=derive_seed(master, trial, "permutation"),
        )
