"""Exception hierarchy shared by all pipeline stages."""


class GliomaPipeError(Exception):
    """Base class for every error raised by gliomapipe."""


class FormatError(GliomaPipeError):
    pass


class CorruptFileError(GliomaPipeError):
    pass


class InvalidDataError(GliomaPipeError, ValueError):
    pass


class IoError(GliomaPipeError, OSError):
    pass


class StudyInconsistentError(GliomaPipeError):
    pass


class MissingModalityError(GliomaPipeError):
    pass


class MissingGroundTruthError(GliomaPipeError):
    pass


class EmptyForegroundError(GliomaPipeError):
    pass


class DegenerateVolumeError(GliomaPipeError):
    pass


class ShapeError(GliomaPipeError, ValueError):
    pass


class DegenerateBatchError(GliomaPipeError):
    pass


class LabelError(GliomaPipeError, ValueError):
    pass


class NoTrainingDataError(GliomaPipeError):
    pass


class EmptyMaskError(GliomaPipeError):
    pass


class EmptyLesionError(GliomaPipeError):
    pass


class InsufficientDataError(GliomaPipeError):
    pass


class StageDependencyError(GliomaPipeError):
    pass


class ConfigError(GliomaPipeError):
    pass
