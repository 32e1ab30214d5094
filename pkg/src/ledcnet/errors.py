"""Exception types shared across the package."""


class LEDCNetError(Exception):
    pass


class ConfigError(LEDCNetError, ValueError):
    """Invalid or inconsistent configuration."""


class ParameterError(LEDCNetError, ValueError):
    """An operation received an out-of-range hyperparameter."""


class ShapeError(LEDCNetError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class DataError(LEDCNetError, ValueError):
    """Input data (images, masks, tiles) is malformed."""


class UndefinedMetricError(LEDCNetError, ArithmeticError):
    pass


class UnsupportedLayerError(LEDCNetError, TypeError):
    """The MAC counter met a layer kind it has no rule for."""


class TrainingDiverged(LEDCNetError, RuntimeError):
    def __init__(self, epoch, batch_index, loss):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}")
