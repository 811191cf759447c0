"""Exception types shared across the package."""


class DailocError(Exception):
    """Base class for all package errors."""


class ShapeError(DailocError):
    """Array dimensions do not match an operation's contract."""


class TrainingError(DailocError):
    """Training-time numerical failure (e.g. a non-finite gradient)."""


class GradientCheckError(DailocError):
    """A gradient check could not be run (e.g. non-deterministic loss)."""


class DataError(DailocError):
    """A record violates the data contract (e.g. RSS out of range)."""


class ParseError(DailocError):
    """A dataset or checkpoint file is malformed."""


class SchemaError(DailocError):
    """A file's declared schema disagrees with its contents."""


class LayoutError(DailocError):
    """A building layout request cannot be satisfied."""


class LifecycleError(DailocError):
    """A lifecycle operation was called against its registry precondition."""


class MetricError(DailocError):
    """A metric was requested on inputs it is not defined for."""


def require_shape(name: str, actual: tuple, expected: tuple) -> None:
    """Raise ShapeError naming both shapes unless they match."""
    if tuple(actual) != tuple(expected):
        raise ShapeError(f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}")
