"""Exception types shared across the package."""


class BosonLoopError(Exception):
    """Base class for all package-specific errors."""


class OutOfBasisError(BosonLoopError):
    """An occupation vector is not representable in the given truncated basis."""


class TruncationError(BosonLoopError):
    """Photon-number weight would leak past the truncation bound n_max."""

    def __init__(self, message, required_n_max=None):
        super().__init__(message)
        self.required_n_max = required_n_max


class DegenerateFixedPointError(BosonLoopError):
    """The channel has no unique stationary state (degenerate unit eigenvalue)."""


class SpectralRadiusError(DegenerateFixedPointError):
    """The loop-to-loop block has spectral radius >= 1, so the stationary
    tensor systems are singular and no unique stationary state is guaranteed."""


class ReconstructionError(BosonLoopError):
    """Density-matrix or distribution reconstruction cannot proceed."""

    def __init__(self, message, missing_moment=None):
        super().__init__(message)
        self.missing_moment = missing_moment


class ConvergenceError(BosonLoopError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(BosonLoopError):
    """Invalid experiment configuration."""
