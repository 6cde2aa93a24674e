"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI maps it to.
"""


class RadioMSMError(Exception):
    exit_code = 1


class ConfigurationError(RadioMSMError, ValueError):
    exit_code = 2


class PlacementError(ConfigurationError):
    pass


class FormatError(RadioMSMError, ValueError):
    exit_code = 2


class ManifestError(FormatError):
    pass


class SizeError(RadioMSMError, ValueError):
    exit_code = 2


class CorpusError(RadioMSMError):
    exit_code = 2


class DimensionError(RadioMSMError, ValueError):
    exit_code = 2


class LabelError(RadioMSMError, ValueError):
    exit_code = 2


class DegenerateLossError(RadioMSMError, ValueError):
    pass


class TrainingDiverged(RadioMSMError, RuntimeError):
    pass


class CheckpointError(RadioMSMError):
    exit_code = 2


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class PreprocessingMismatch(RadioMSMError):
    exit_code = 3


class MetricUndefined(RadioMSMError, ValueError):
    pass
