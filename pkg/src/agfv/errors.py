"""Exception hierarchy. CLI exit codes hang off the three base classes."""


class AgfvError(Exception):
    exit_code = 2


class UsageError(AgfvError):
    exit_code = 1


class DataError(AgfvError):
    exit_code = 2


class NumericalError(AgfvError):
    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class AlignmentError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ScoreFileError(DataError):
    pass


class ProtocolError(UsageError):
    pass


class ProviderError(DataError):
    def __init__(self, provider_id: str, message: str):
        super().__init__(f"provider {provider_id!r}: {message}")
        self.provider_id = provider_id


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, last_good: str | None = None):
        if last_good:
            message = f"{message} (last good checkpoint: {last_good})"
        super().__init__(message)
        self.last_good = last_good
