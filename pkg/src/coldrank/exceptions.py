class ColdRankError(Exception):
    """Base class of every error raised deliberately by coldrank."""


class DimensionError(ColdRankError, ValueError):
    pass


class SchemaError(ColdRankError, ValueError):
    pass


class FeatureRangeError(ColdRankError, IndexError):
    pass


class UndefinedMetricError(ColdRankError, ValueError):
    pass


class DatasetError(ColdRankError, ValueError):
    pass


class ConfigError(ColdRankError, ValueError):
    pass


class ModelNotReadyError(ColdRankError, RuntimeError):
    pass


class CheckpointError(ColdRankError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    # format version or schema digest differs from what the caller expects
    pass
