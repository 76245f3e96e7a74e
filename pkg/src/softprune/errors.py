"""Exception types raised across the package."""


class SoftPruneError(Exception):
    """Base class for all package errors (mapped to exit code 2 by the CLI)."""


class DimensionError(SoftPruneError, ValueError):
    pass


class GeometryError(SoftPruneError, ValueError):
    pass


class EmptyBatchError(SoftPruneError, ValueError):
    pass


class LabelError(SoftPruneError, ValueError):
    pass


class ConfigError(SoftPruneError, ValueError):
    pass


class CacheError(SoftPruneError, RuntimeError):
    pass


class IndexSetError(SoftPruneError, IndexError):
    pass


class ScheduleError(SoftPruneError, ValueError):
    pass


class NumericError(SoftPruneError, ArithmeticError):
    pass


class EpochRangeError(SoftPruneError, ValueError):
    pass


class SelectionError(SoftPruneError, ValueError):
    pass


class LayerLookupError(SoftPruneError, KeyError):
    pass


class PolicyError(SoftPruneError, ValueError):
    pass


class ExtractionError(SoftPruneError, ValueError):
    pass


class FormatError(SoftPruneError, ValueError):
    pass


class DivergenceError(SoftPruneError, FloatingPointError):
    pass


class ConsistencyError(SoftPruneError, AssertionError):
    pass
