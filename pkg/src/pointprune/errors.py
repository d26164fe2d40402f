"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class CountError(ValueError):
    """A requested count exceeds what the input provides (e.g. sampling m > n)."""


class InputError(ValueError):
    """An input collection is empty or otherwise unusable."""


class EmptyNeighborhoodError(ValueError):
    """A reduction was requested over zero neighbors."""


class InsufficientPointsError(ValueError):
    """Too few points to estimate a statistic (correlation needs at least 2)."""


class TraceError(ValueError):
    """A forward trace is missing data required by the caller."""


class StructuralError(ValueError):
    """A network spec, state, plan, or checkpoint is internally inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed (bad version, length mismatch, ...)."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class EvaluationError(RuntimeError):
    """A loss evaluation produced a non-finite value."""
