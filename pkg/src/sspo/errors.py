"""Exception types raised across the package."""


class SSPOError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SSPOError, ValueError):
    pass


class UnsupportedPrimitive(SSPOError, TypeError):
    pass


class TimestepOutOfRange(SSPOError, ValueError):
    pass


class DegenerateWeight(SSPOError, ValueError):
    pass


class ConditionOutOfRange(SSPOError, ValueError):
    pass


class NonPositiveScale(SSPOError, ValueError):
    pass


class EmptyBatch(SSPOError, ValueError):
    pass


class EmptySet(SSPOError, ValueError):
    pass


class EmptyStore(SSPOError, LookupError):
    pass


class IndexGap(SSPOError, ValueError):
    pass


class DivergedLoss(SSPOError, FloatingPointError):
    pass


class ConfigError(SSPOError, ValueError):
    pass


class CheckpointIoError(SSPOError, OSError):
    pass


class ChecksumMismatch(SSPOError):
    pass


class FormatVersionMismatch(SSPOError):
    """Checkpoint header disagrees with what the reader expected.

    ``found`` and ``expected`` carry whatever was compared: format version
    numbers or :class:`~sspo.policy.PolicySpec` instances.
    """

    def __init__(self, message, found=None, expected=None):
        super().__init__(message)
        self.found = found
        self.expected = expected
