"""Exception hierarchy for the iism package."""


class IISMError(Exception):
    """Base class for every error raised by iism."""


class LabelError(IISMError, ValueError):
    """A label map is malformed or holds an out-of-range class id."""


class InvalidLogitError(IISMError, ValueError):
    pass


class CatalogError(IISMError, ValueError):
    pass


class FormatError(IISMError, ValueError):
    """A file does not follow the IISM1 or label-PNG layout."""


class SelectionError(IISMError, ValueError):
    pass


class FusionError(IISMError, ValueError):
    pass


class SplitError(IISMError, ValueError):
    pass


class IngestionError(IISMError):
    pass


class ConfigError(IISMError, ValueError):
    pass


class PromptError(IISMError, ValueError):
    pass


class ScheduleError(IISMError, ValueError):
    pass


class TrainingDivergedError(IISMError, RuntimeError):
    pass


class NumericalError(IISMError, ArithmeticError):
    pass


class CorpusTooSmallError(IISMError, ValueError):
    pass


class CheckpointError(IISMError):
    pass


class DigestError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass
