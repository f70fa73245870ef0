"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GrfhdError(Exception):
    exit_code = 1


class ParameterError(GrfhdError, ValueError):
    exit_code = 1


class DegenerateInputError(GrfhdError, ValueError):
    exit_code = 1


class StateError(GrfhdError, RuntimeError):
    exit_code = 1


class EmptyComparisonError(GrfhdError, ValueError):
    exit_code = 1


class FormatError(GrfhdError, ValueError):
    exit_code = 2


class StructureError(FormatError):
    """Point cloud is not laid out on a uniform lattice."""


class NumericalError(GrfhdError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class ConditioningError(NumericalError):
    pass


class CapacityError(GrfhdError, MemoryError):
    exit_code = 4
