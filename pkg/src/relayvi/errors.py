"""Exception types shared across the package."""


class RelayVIError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RelayVIError, ValueError):
    """Tensor shapes or axes incompatible with the requested operation."""


class DomainError(RelayVIError, ValueError):
    """Input outside an operation's mathematical domain (log/sqrt of negatives, sigma <= 0)."""


class ConfigError(RelayVIError, ValueError):
    """Invalid model or run configuration (unknown architecture, empty relay groups, bad fraction)."""


class ContractError(RelayVIError, RuntimeError):
    """A runtime contract was violated (non-scalar backward root, missing grads, frozen parameter moved)."""


class IdxFormatError(RelayVIError, ValueError):
    """IDX container has a bad magic number or malformed header."""


class IdxLengthError(IdxFormatError):
    """IDX payload shorter than the header promises."""


class DataConsistencyError(RelayVIError, ValueError):
    """Image and label files disagree (for example on item count)."""


class MetricError(RelayVIError, ValueError):
    """Metric undefined for this input (no observed or no missing entries)."""
