"""Exception types raised across the package."""


class LdbError(Exception):
    pass


class ShapeError(LdbError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LdbError, ValueError):
    """Invalid hyperparameter, preset name or layer selection."""


class DataError(LdbError, ValueError):
    """Labels or sample counts are inconsistent."""


class FormatError(DataError):
    """A binary file is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergedError(LdbError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, step, loss):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: loss={loss}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class MeasurementError(LdbError, RuntimeError):
    """The wall clock went backwards during a timed region."""
