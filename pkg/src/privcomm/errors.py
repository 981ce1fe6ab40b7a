"""Exception types shared across the package."""


class PrivcommError(Exception):
    """Base class for all library errors."""


class DimensionError(PrivcommError, ValueError):
    """A vector or frame has the wrong (or a non power-of-two) dimension."""


class OutOfRangeError(PrivcommError, ValueError):
    """A value lies outside the range an operation is valid for."""


class InfeasibleError(PrivcommError, ValueError):
    """No parameter choice satisfies the requested privacy/communication budget."""


class ProtocolViolation(PrivcommError, ValueError):
    """A client report is malformed (coordinate or chunk out of range, ...)."""


class ConfigError(PrivcommError, ValueError):
    """An experiment configuration is invalid."""


class KashinConvergenceError(PrivcommError, RuntimeError):
    """Kashin encoding did not reach the reconstruction tolerance.

    ``residual`` holds the largest relative residual norm left after the last
    iteration. Resampling the frame's sign seed usually helps.
    """

    def __init__(self, residual: float, iters: int):
        self.residual = residual
        self.iters = iters
        super().__init__(
            f"Kashin encoding did not converge after {iters} iterations "
            f"(relative residual {residual:.3e})"
        )
