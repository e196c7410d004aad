class FingerNetError(Exception):
    """Base class for every error raised on purpose by this package."""


class ShapeError(FingerNetError, ValueError):
    pass


class ModelError(FingerNetError):
    pass


class CheckpointError(ModelError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ShapeInconsistencyError(CheckpointError):
    pass


class DataError(FingerNetError):
    pass


class ConfigError(FingerNetError, ValueError):
    pass
