"""Exception hierarchy. The CLI maps any ``IplforgeError`` to exit code 2."""


class IplforgeError(Exception):
    pass


class ConfigError(IplforgeError):
    pass


class DatasetError(IplforgeError):
    pass


class SelectionError(IplforgeError):
    pass


class TokenizerError(IplforgeError):
    pass


class MetricError(IplforgeError):
    pass


class ModelError(IplforgeError):
    pass


class LossError(IplforgeError):
    pass


class WarmStartError(IplforgeError):
    pass


class CheckpointError(IplforgeError):
    pass


class DecodeError(IplforgeError):
    pass


class TrainingError(IplforgeError):
    pass


class CurriculumError(IplforgeError):
    pass
