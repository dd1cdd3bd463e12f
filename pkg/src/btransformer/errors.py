"""Exception hierarchy shared across the package."""


class BTransformerError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BTransformerError, ValueError):
    pass


class ContractError(BTransformerError, ValueError):
    """A caller violated an operation's precondition."""


class DataError(BTransformerError, ValueError):
    pass


class SampleError(DataError):
    """A single entity pair cannot be encoded (e.g. its marked span is too long)."""


class FormatError(BTransformerError, ValueError):
    """A file on disk does not follow its declared format."""


class ConfigError(BTransformerError, ValueError):
    pass


class TrainingDivergedError(BTransformerError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss
