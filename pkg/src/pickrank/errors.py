"""Exception hierarchy. The CLI maps each family to an exit code."""


class PickRankError(Exception):
    exit_code = 3


class ConfigError(PickRankError, ValueError):
    """Bad user input: config values, flags, ranker strings."""

    exit_code = 1


class DataError(PickRankError):
    """Unusable data or model files."""

    exit_code = 2


class SchemaMismatchError(DataError):
    pass


class SingleClassError(DataError, ValueError):
    pass


class ModelFormatError(DataError):
    pass


class BudgetExhaustedError(DataError):
    pass


class CalibrationError(DataError):
    pass


class InvariantError(PickRankError):
    exit_code = 3


class SceneInvariantError(InvariantError):
    pass
