"""Communication and privacy bookkeeping for one protocol execution."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class TranscriptStats:
    """Bit-exact communication counters plus the budget the run is accounted at.

    ``bits_total`` counts client payload bits only; framing added by a
    shuffler or transport (round headers) is kept apart in ``overhead_bits``.
    """

    bits_total: int
    bits_per_client_mean: float
    messages_total: int
    accounted_eps: float = math.inf
    accounted_delta: float = 0.0
    overhead_bits: int = 0

    def __post_init__(self):
        if self.bits_total < 0 or self.messages_total < 0 or self.overhead_bits < 0:
            raise ValueError("communication counters must be non-negative")

    @classmethod
    def from_counts(cls, bits_total: int, messages_total: int, n: int, **kw) -> "TranscriptStats":
        return cls(int(bits_total), bits_total / n, int(messages_total), **kw)
