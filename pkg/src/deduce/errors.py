"""Exception types shared across the package."""


class InputError(ValueError):
    """An argument failed validation (shape, range, index)."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at training step {step}")
        self.step = step
        self.loss = loss


class SearchAborted(RuntimeError):
    """A counterfactual search produced a non-finite gradient."""


class ConfigError(ValueError):
    """Configuration document is malformed or holds an out-of-range value."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class FormatError(ValueError):
    """Binary container could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IdxMagicError(FormatError):
    pass


class IdxTruncatedError(FormatError):
    pass


class IdxCountMismatchError(FormatError):
    pass
