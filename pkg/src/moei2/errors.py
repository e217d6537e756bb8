"""Exception types raised across the toolkit."""


class MoEI2Error(Exception):
    pass


class BoundsError(MoEI2Error, ValueError):
    pass


class FactorizationError(MoEI2Error, ArithmeticError):
    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix not positive definite at pivot {pivot}")


class SingularTriangularError(MoEI2Error, ArithmeticError):
    pass


class RoutingError(MoEI2Error, ValueError):
    pass


class CheckpointFormatError(MoEI2Error, ValueError):
    pass


class InfeasibleBudgetError(MoEI2Error, ValueError):
    pass


class SearchCapError(MoEI2Error, ValueError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"search space of {count} options exceeds cap {cap}")


class DecompositionError(MoEI2Error, ArithmeticError):
    pass


class DivergenceError(MoEI2Error, FloatingPointError):
    pass


class ConfigError(MoEI2Error, ValueError):
    pass


class StageError(MoEI2Error, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class PlanError(MoEI2Error, ValueError):
    pass
