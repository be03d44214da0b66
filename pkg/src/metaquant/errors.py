"""Exception types shared across the package."""


class MetaQuantError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaQuantError, ValueError):
    pass


class ParameterError(MetaQuantError, ValueError):
    pass


class NumericError(MetaQuantError, ArithmeticError):
    pass


class InputError(MetaQuantError, ValueError):
    pass


class AssignmentError(MetaQuantError, ValueError):
    pass


class StageOrderError(MetaQuantError, RuntimeError):
    pass


class TrainingDiverged(NumericError):
    def __init__(self, stage, iteration, loss):
        super().__init__(f"loss became {loss} at stage {stage}, iteration {iteration}")
        self.stage = stage
        self.iteration = iteration


class InfeasibleBudgetError(MetaQuantError, ValueError):
    pass


class FormatError(MetaQuantError, ValueError):
    pass


class IntegrityError(MetaQuantError, ValueError):
    pass


class UninitializedCellError(MetaQuantError, RuntimeError):
    def __init__(self, layer, cell):
        super().__init__(f"batch-norm cell {cell} of {layer or 'layer'} was never trained or initialized")
        self.cell = cell
