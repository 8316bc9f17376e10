class SeqretError(Exception):
    """Base class for all package errors."""


class InputError(SeqretError):
    """Malformed or missing input data (CLI exit code 2)."""


class CollinearityError(SeqretError):
    """Design matrix is rank deficient."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class ConvergenceError(SeqretError):
    """An estimation stage failed to converge."""


class StageError(SeqretError):
    """A pipeline stage failed (CLI exit code 1)."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
