"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line failure message.
"""


class SpectracastError(Exception):
    category = "error"


class DimensionError(SpectracastError, ValueError):
    category = "dimension"


class ConfigError(SpectracastError, ValueError):
    category = "config"


class NumericError(SpectracastError, FloatingPointError):
    category = "numeric"


class ContractError(SpectracastError, RuntimeError):
    category = "contract"


class DataError(SpectracastError, ValueError):
    category = "data"


class ParseError(DataError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DataError):
    category = "validation"


class FormatError(SpectracastError, ValueError):
    category = "format"


class TruncationError(FormatError):
    category = "truncated"


class CheckpointError(SpectracastError, ValueError):
    category = "checkpoint"


class ReportError(SpectracastError, ValueError):
    category = "report"


class TrainingDivergedError(NumericError):
    category = "diverged"

    def __init__(self, iteration, loss, detail=None):
        msg = f"non-finite loss {loss!r} at iteration {iteration}"
        super().__init__(msg if detail is None else f"{msg} ({detail})")
        self.iteration = iteration
        self.loss = loss
