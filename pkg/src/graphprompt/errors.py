"""Exception types shared across the package."""


class GraphError(ValueError):
    """A graph or transformation violates its structural invariants."""


class DatasetFormatError(ValueError):
    """A dataset or graph file is malformed."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SolverPreconditionError(ValueError):
    """The model is not a single-layer linear GIN with sum readout."""


class CheckpointError(ValueError):
    """A checkpoint or prompt file is corrupt or does not match the config."""


class NumericError(ArithmeticError):
    """Base for numerical failures (non-finite loss, degenerate denominator)."""


class DegenerateDenominatorError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    pass
