"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ProbabilityError(ValueError):
    """A probability vector is malformed (negative mass or bad total)."""


class ModeError(ValueError):
    """An operation was invoked in a mode it does not support."""


class DataError(ValueError):
    """Dataset or label content is invalid."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed (magic, version, or truncation)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
