"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI uses when it escapes a
command.
"""

from typing import Optional


class SifError(Exception):
    exit_code = 1


class ConfigError(SifError):
    exit_code = 2


class DataFormatError(SifError):
    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SplitError(SifError):
    exit_code = 2

    def __init__(self, required: int, available: int, detail: str = ""):
        message = f"need {required} samples, only {available} available"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.required = required
        self.available = available


class DimensionError(SifError):
    exit_code = 2

    def __init__(self, layer: str, expected, actual):
        super().__init__(f"layer {layer!r}: expected {expected}, got {actual}")
        self.layer = layer


class LayoutMismatchError(SifError):
    exit_code = 2


class NumericOverflowError(SifError):
    exit_code = 3


class TrainingDivergedError(SifError):
    exit_code = 3

    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(
            f"loss became non-finite at epoch {epoch} "
            f"(last finite epoch {last_finite_epoch})"
        )
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


class ConvergenceError(SifError):
    exit_code = 3

    def __init__(self, grad_norm: float, tolerance: float):
        super().__init__(
            f"did not converge: gradient norm {grad_norm:.3e} > {tolerance:.1e}"
        )
        self.grad_norm = grad_norm


class InfluenceError(SifError):
    exit_code = 4


class LissaDivergenceError(InfluenceError):
    def __init__(self, step: int, repeat: int = 0):
        super().__init__(f"LiSSA iterate became non-finite at step {step} (repeat {repeat})")
        self.step = step
        self.repeat = repeat


class NotPositiveDefiniteError(InfluenceError):
    def __init__(self, damping: float):
        super().__init__(
            f"Hessian with damping {damping:g} is not positive definite; "
            "try a larger damping"
        )
        self.damping = damping


class OracleCapError(InfluenceError):
    def __init__(self, num_params: int, cap: int):
        super().__init__(f"model has {num_params} parameters, oracle cap is {cap}")
        self.num_params = num_params
        self.cap = cap


class AttackFitError(SifError):
    exit_code = 5


class CheckpointMismatchError(SifError):
    exit_code = 5


class OracleFailure(SifError):
    exit_code = 6
