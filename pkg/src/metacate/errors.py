"""Exception hierarchy shared by every stage of the pipeline."""


class MetaCateError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MetaCateError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MetaCateError, ValueError):
    """An input lies outside the domain of an operation (e.g. log of a non-positive value)."""


class NumericalError(MetaCateError, ArithmeticError):
    """Non-finite values or a failed factorization."""


class ParameterError(MetaCateError, ValueError):
    """A hyperparameter or scalar argument is out of range."""


class EpisodeError(MetaCateError):
    """An episode cannot be adapted (typically an empty treatment arm)."""


class SamplingError(MetaCateError):
    """A task does not hold enough instances to draw the requested episode."""


class LabelingError(MetaCateError):
    """Pseudo-CATE labeling failed for a task."""


class TaskFormatError(MetaCateError, ValueError):
    """A task file violates the CSV schema or the binary-treatment contract."""


class SplitError(MetaCateError, ValueError):
    """Too few tasks to form the requested train/validation/test split."""


class EvaluationError(MetaCateError):
    """Evaluation prerequisites are missing (e.g. no true CATE column)."""
