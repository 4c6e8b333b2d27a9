"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-readable ``code`` so the CLI and the
HTTP service can report failures uniformly (one line: ``code: message``).
"""


class X2FaceError(Exception):
    """Base class for all domain errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message


class ResolutionMismatchError(X2FaceError):
    code = "resolution-mismatch"


class ShapeError(X2FaceError):
    """Tensor argument has the wrong rank or dimensions."""

    code = "bad-shape"


class ConfigError(X2FaceError):
    code = "bad-config"


class CheckpointError(X2FaceError):
    code = "checkpoint-error"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    code = "version-mismatch"


class LengthMismatchError(CheckpointError):
    code = "length-mismatch"


class ShapeMismatchError(CheckpointError):
    code = "shape-mismatch"


class ManifestError(CheckpointError):
    code = "bad-manifest"


class DatasetError(X2FaceError):
    code = "dataset-error"


class DatasetExistsError(DatasetError):
    code = "dataset-exists"


class TrainingAbortedError(X2FaceError):
    code = "training-aborted"

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ControlMapError(X2FaceError):
    code = "control-map-error"


class OverlayError(X2FaceError):
    code = "bad-overlay"
