"""
Exception hierarchy for ssmnd.
Every failure the library raises on purpose derives from SsmNdError so the CLI can
turn it into a structured error object and a non-zero exit code.
"""

from typing import Optional


class SsmNdError(Exception):
    """Base class for all ssmnd errors."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class ShapeError(SsmNdError, ValueError):
    """Array extents or lengths do not line up."""


class InvalidPermutation(SsmNdError):
    """An axis permutation is not a permutation of 0..N-1 for the array's rank."""


class MissingSeed(SsmNdError):
    """backward() on a non-scalar root without an explicit seed gradient."""


class InvalidOrdering(SsmNdError):
    """A scan ordering does not match the data rank or cannot be parsed."""


class InvalidDelta(SsmNdError):
    """A discretization step size is not strictly positive."""


class InvalidBoundary(SsmNdError):
    """Sub-sequence cut positions are out of range or not strictly increasing."""


class HeadSplitError(SsmNdError):
    """Inner width is not divisible by the number of scan heads."""


class ArrangementError(SsmNdError):
    """A block arrangement cannot be built for the requested rank or layer count."""


class FactorizationError(SsmNdError):
    """A scan factorization policy does not apply to the grid rank."""


class PatchError(SsmNdError):
    """Input extents are not divisible by the patch size."""


class PolicyError(SsmNdError):
    """Unknown positional-embedding inflation policy."""


class InflateError(SsmNdError):
    """A 2-D checkpoint cannot be inflated into the requested 3-D configuration."""


class TaskError(SsmNdError):
    """Unknown synthetic task or invalid task parameters."""


class ConfigError(SsmNdError):
    """A configuration document is invalid."""


class CheckpointError(SsmNdError):
    """A checkpoint directory is missing, corrupt or incompatible."""


class TokenIndexError(SsmNdError, IndexError):
    """A token coordinate or flat token index lies outside the model's token grid."""
