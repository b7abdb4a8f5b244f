"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class EmptyDatasetError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run or compressor configuration."""


class CorruptMessageError(ValueError):
    """A compressed message does not decode against its layer."""


class ProtocolError(RuntimeError):
    """A synchronous round is missing a worker's message."""


class DivergenceError(ArithmeticError):
    def __init__(self, epoch, iteration, value=float("nan")):
        super().__init__(f"training diverged at epoch {epoch}, iteration {iteration} (loss={value})")
        self.epoch = epoch
        self.iteration = iteration
        self.value = value
