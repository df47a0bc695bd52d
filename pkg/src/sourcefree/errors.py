"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SourceFreeError(Exception):
    exit_code = 1
    kind = "error"


class ConfigurationError(SourceFreeError):
    """Invalid configuration: bad label sets, sizes, missing priors, schema violations."""

    exit_code = 2
    kind = "config"


class DataError(SourceFreeError):
    """Corpus, dataset-construction or prior-estimation failure."""

    exit_code = 3
    kind = "data"


class InvalidInputError(DataError, ValueError):
    """Array arguments with the wrong shape or out-of-range values."""

    kind = "invalid-input"


class TrainingDivergedError(SourceFreeError):
    exit_code = 4
    kind = "diverged"

    def __init__(self, message, step=None, loss_name=None):
        super().__init__(message)
        self.step = step
        self.loss_name = loss_name
