"""Exception hierarchy shared by every module."""


class ShaderFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(ShaderFlowError, ValueError):
    """Operand shapes do not agree."""


class NonFiniteError(ShaderFlowError, ArithmeticError):
    """A NaN or infinity appeared where only finite values are allowed."""


class FullyMaskedRowError(ShaderFlowError, ArithmeticError):
    """Every logit of a softmax row is masked out."""

    def __init__(self, row: int):
        super().__init__(f"fully masked row {row}")
        self.row = row


class GradientError(ShaderFlowError, RuntimeError):
    """backward() was called on something it cannot differentiate."""


class ConfigError(ShaderFlowError, ValueError):
    """Invalid configuration value or combination."""


class CacheMismatchError(ShaderFlowError, ValueError):
    """A KV cache store does not match the layout it is used with."""


class TrainingDivergedError(ShaderFlowError, ArithmeticError):
    """Loss exceeded the divergence threshold during training."""

    def __init__(self, step: int, loss: float, trace: list[float]):
        super().__init__(f"training diverged at step {step}: loss={loss:.6g}")
        self.step = step
        self.loss = loss
        self.trace = trace
