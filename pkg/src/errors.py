"""
Error types for Robust Lasso.

Each error carries the process exit code the command-line driver uses
when the error reaches the top level:

    2 - usage, configuration or validation error
    3 - data-shape error (dimension mismatch, no kernel space)
    4 - numerical failure (path step, embedding fit)
"""


class RobustLassoError(Exception):
    """Base class for all Robust Lasso errors."""

    exit_code = 1


class ConfigError(RobustLassoError, ValueError):
    """Invalid configuration value, flag or stage combination."""

    exit_code = 2


class DatasetError(RobustLassoError, ValueError):
    """Dataset content failed validation (bad cell, missing column, bad generator config)."""

    exit_code = 2


class DataShapeError(RobustLassoError, ValueError):
    """Array shapes do not agree."""

    exit_code = 3


class NoKernelSpaceError(DataShapeError):
    """The design has no kernel space, so there are no effective observations."""

    def __init__(self, n_samples: int, rank: int):
        super().__init__(
            f"no kernel space: reduce feature dimension (use TDCA) "
            f"[n={n_samples}, rank={rank}, effective observations={n_samples - rank}]"
        )
        self.n_samples = n_samples
        self.rank = rank


class NumericalError(RobustLassoError, ArithmeticError):
    """A numerical routine failed to produce a valid result."""

    exit_code = 4


class PathError(NumericalError):
    """
    A regularization path step failed.

    The breakpoints computed before the failure are kept in `prefix`
    (a RegularizationPath, or None if nothing was computed).
    """

    def __init__(self, message: str, prefix=None):
        super().__init__(message)
        self.prefix = prefix


class EmbeddingError(NumericalError):
    """The softmax embedding fit produced a non-finite objective."""
