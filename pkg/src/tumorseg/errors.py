"""Exception types raised across the package."""


class TumorSegError(Exception):
    """Base class for all package errors."""


class FormatError(TumorSegError, ValueError):
    """A file or array violates its declared format (e.g. bad label value)."""


class SpecError(TumorSegError, ValueError):
    """An invalid phantom or patch specification."""


class RangeError(TumorSegError, ValueError):
    """A value lies outside its permitted range."""


class DegenerateInputError(TumorSegError, ValueError):
    """Input has no usable statistics (e.g. constant or empty support)."""


class SamplingError(TumorSegError, RuntimeError):
    """A sampling stratum is empty."""


class ShapeError(TumorSegError, ValueError):
    """Array shapes are incompatible."""


class ConfigError(TumorSegError, ValueError):
    """An invalid or mismatched configuration."""


class TrainingError(TumorSegError, RuntimeError):
    """Training diverged (e.g. NaN loss)."""
