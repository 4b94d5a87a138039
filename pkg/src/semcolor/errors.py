"""Exception types raised across the package."""


class SemcolorError(Exception):
    """Base class for package errors."""


class ShapeError(SemcolorError, ValueError):
    """Array dimensions do not agree with what an operation requires."""


class MaskError(SemcolorError, ValueError):
    """Reference masks leave pixels uncovered or cover some pixels twice."""


class CheckpointError(SemcolorError):
    pass


class FingerprintError(CheckpointError):
    """Checkpoint was written for a different network configuration."""


class CorruptCheckpointError(CheckpointError):
    pass


class DivergenceError(SemcolorError, RuntimeError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class SampleLoadError(SemcolorError, OSError):
    def __init__(self, source_id, cause):
        super().__init__(f"{source_id}: {cause}")
        self.source_id = source_id


class SurveyValidationError(SemcolorError, ValueError):
    def __init__(self, participant_id, reason):
        super().__init__(f"participant {participant_id!r}: {reason}")
        self.participant_id = participant_id
