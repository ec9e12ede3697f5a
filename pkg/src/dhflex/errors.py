class DhflexError(Exception):
    """Base class for all simulator errors."""


class ContractViolation(DhflexError, ValueError):
    pass


class SizingError(DhflexError):
    pass


class SolverError(DhflexError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FittingError(DhflexError):
    pass


class IngestionError(DhflexError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class AlignmentError(DhflexError):
    pass


class SimulationError(DhflexError):
    """Wraps a module failure with the step time and the module that raised."""

    def __init__(self, t, module, cause):
        super().__init__(f"t={t:.0f} s in {module}: {cause}")
        self.t = t
        self.module = module
        self.cause = cause
