"""Exception hierarchy for the risk engine."""


class EngineError(Exception):
    """Base class for every error the engine raises on purpose."""


class IngestError(EngineError):
    """Input file cannot be parsed at all (missing header, unreadable)."""


class RegistryError(EngineError):
    pass


class ConfigError(EngineError):
    pass


class DetectionError(EngineError):
    """Detection or evaluation request that cannot be satisfied."""


class ClusteringError(EngineError):
    pass


class ModelFormatError(EngineError):
    pass
