"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a constructor or config receives an invalid parameter."""


class ContractError(ValueError):
    """Raised when inputs violate an operation's shape or value contract."""


class NotFittedError(RuntimeError):
    """Raised when an estimator is used before ``fit``."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite.

    The path of the diagnostic checkpoint written before aborting is kept in
    ``checkpoint_path`` (``None`` if nothing could be written).
    """

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
