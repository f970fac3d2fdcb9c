"""Exception hierarchy shared across the package.

Every error raised on purpose derives from UniavError so callers can catch
one base class at CLI or pipeline boundaries and still let genuine bugs
(TypeError, IndexError, ...) propagate.
"""


class UniavError(Exception):
    """Base class for all package-specific failures."""


class ConfigurationError(UniavError):
    """Invalid or inconsistent configuration values, detected before any work
    is attempted (bad hop/window relation, unknown mask rule, mismatched
    sample rates between config and payload, ...)."""


class InputError(UniavError):
    """Structurally invalid runtime input: wrong shape, wrong length, NaN or
    Inf payloads, empty signals, references that are identically zero."""


class DataError(UniavError):
    """A dataset record that cannot be loaded or fails integrity checks.

    Carries the offending record id so batch-level callers can report which
    sample broke without re-parsing the manifest.
    """

    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(message if record_id is None else f"[{record_id}] {message}")
        self.record_id = record_id


class TrainingDivergenceError(UniavError):
    """Raised when the optimizer walks into NaN/Inf loss territory."""


class EvaluationTaskError(UniavError):
    """A requested evaluation task cannot run, most often because the loaded
    model lacks the head that task needs. Evaluation must fail loudly here
    rather than silently skipping the task."""

    def __init__(self, message: str, task: str | None = None):
        super().__init__(message if task is None else f"[{task}] {message}")
        self.task = task


class CheckpointError(UniavError):
    """Checkpoint payloads that do not match the requested architecture, or
    that are missing required state."""
