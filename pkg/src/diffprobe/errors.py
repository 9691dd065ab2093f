"""Exception hierarchy shared by every module."""


class DiffProbeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfigError(DiffProbeError, ValueError):
    """A configuration is malformed or internally inconsistent."""


class InvalidInputError(DiffProbeError, ValueError):
    """An argument violates an operation's precondition (shape, range, ...)."""


class DegenerateInputError(InvalidInputError):
    """Input has no variance left to compare (e.g. constant after centering)."""


class CorruptCacheError(DiffProbeError):
    """A cached artifact failed its schema or checksum check."""

    def __init__(self, path, field, detail=""):
        self.path = str(path)
        self.field = field
        msg = f"corrupt cache {self.path}: field {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ProvenanceError(DiffProbeError):
    """Two artifacts disagree about where they came from."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} provenance mismatch: expected {expected}, got {actual}")


class TrainingDivergedError(DiffProbeError, RuntimeError):
    """Loss became non-finite during optimisation."""


class EmptySweepError(DiffProbeError):
    """No sweep cell completed successfully."""
