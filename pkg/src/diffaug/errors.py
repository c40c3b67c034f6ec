"""Exception hierarchy shared across the package."""


class DiffaugError(Exception):
    """Base class for all package-specific failures."""


class CategoryMismatchError(DiffaugError):
    """Two objects that must share a category set do not."""


class ManifestError(DiffaugError):
    """A dataset manifest is malformed or violates an invariant."""


class DetectionError(DiffaugError):
    """A detection map could not be produced."""


class PoseBackendError(DetectionError):
    """The configured pose backend failed; carries its diagnostic."""


class GenerationError(DiffaugError):
    """Candidate generation failed (backend error, bad output, bad request)."""


class SelectionError(DiffaugError):
    """Candidate selection could not be performed."""


class TrainingDivergedError(DiffaugError):
    """Training loss became non-finite; aborted with diagnostics."""


class CheckpointError(DiffaugError):
    """A model checkpoint could not be written or read back."""


class ConfigError(DiffaugError):
    """Invalid pipeline configuration (CLI exit code 1)."""


class StageError(DiffaugError):
    """A pipeline stage failed (CLI exit code 2)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
