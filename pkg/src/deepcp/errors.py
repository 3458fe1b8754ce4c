"""Exception types. Each maps to a CLI exit code (see ``deepcp.cli``)."""


class InvalidArgumentError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class InfeasibleRError(ConfigurationError):
    """Mask tuning could not reach the requested acceleration."""


class DegenerateInputError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class FormatError(IOError):
    """Malformed file header or payload."""


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
