"""Error types shared across the package. Each carries a stable code string."""


class FiberflowError(Exception):
    code = "GENERIC"

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class MassMismatch(FiberflowError):
    code = "MASS_MISMATCH"


class MarginalMismatch(FiberflowError):
    code = "MARGINAL_MISMATCH"


class SolverDiverged(FiberflowError):
    code = "SOLVER_DIVERGED"


class MonotonicityViolation(FiberflowError):
    code = "MONOTONICITY_VIOLATION"


class BoundaryLeakExceeded(FiberflowError):
    code = "BOUNDARY_LEAK_EXCEEDED"


class CflViolation(FiberflowError):
    code = "CFL_VIOLATION"


class UnsupportedInteraction(FiberflowError):
    code = "UNSUPPORTED_INTERACTION"


class ConfigError(FiberflowError):
    code = "CONFIG_ERROR"
