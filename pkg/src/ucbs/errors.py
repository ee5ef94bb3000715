"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Image content is unusable (non-finite or out-of-range pixels)."""


class FormatVersionError(ValueError):
    """A persisted file (manifest, checkpoint, report) has the wrong format or version."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged: non-finite loss at epoch {epoch}")


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested on a vector with zero variance."""


class UndefinedRatioError(ValueError):
    """A ratio metric was requested with a zero denominator."""
