"""Exception types shared across the package."""


class CSDNetError(Exception):
    """Base class for all package errors."""


class DomainError(CSDNetError, ValueError):
    """Input outside an operation's domain (bad shape, bad range)."""


class DegenerateWindowError(DomainError):
    """CFAR training window holds no usable cells."""


class DegenerateAttentionError(DomainError):
    """Attention weights cannot be normalized (all zero)."""


class UndefinedMetricError(DomainError):
    """Metric undefined for this input, e.g. empty ground-truth foreground."""


class NumericError(CSDNetError, FloatingPointError):
    """Non-finite value met during a forward pass or optimization."""


class WeightLoadError(CSDNetError):
    """Weight archive does not match the model layout."""

    def __init__(self, message, mismatched=()):
        super().__init__(message)
        self.mismatched = list(mismatched)


class EmbeddingFormatError(CSDNetError, ValueError):
    """Embedding file has the wrong header, dtype or shape."""


class EmbeddingIOError(CSDNetError, OSError):
    """Embedding file is truncated or unreadable."""


class DataError(CSDNetError):
    """Dataset files missing or unreadable."""


class ConfigError(CSDNetError):
    """One or more configuration problems, reported together."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
