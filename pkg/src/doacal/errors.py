"""Exception types shared across the package."""


class NotPositiveDefiniteError(ValueError):
    """A covariance block is singular or indefinite.

    Carries the index of the offending block when known.
    """

    def __init__(self, message: str, block_index: int | None = None):
        super().__init__(message)
        self.block_index = block_index


class RankDeficientError(ValueError):
    """A matrix that must have full column rank does not.

    ``columns`` names the offending (near-dependent) columns when known.
    """

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class SingularFisherError(ValueError):
    """The Fisher information matrix is singular (unidentifiable setup)."""


class ConfigError(ValueError):
    """Invalid or unknown entry in an experiment config file."""


class EstimationError(RuntimeError):
    """An estimator update failed; carries the outer-iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
