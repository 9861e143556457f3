"""Exception types shared across the package.

Plain argument-domain problems (out-of-range step, empty batch, unknown
field) raise ValueError; the classes here cover failures that callers need
to tell apart, e.g. for CLI exit codes or targeted recovery.
"""


class CptlabError(Exception):
    """Base class for package-specific errors."""


class ConfigError(CptlabError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class PersistenceError(CptlabError):
    """File I/O failure while reading or writing artifacts (CLI exit code 4)."""


class CheckpointFormatError(PersistenceError):
    """Checkpoint file does not start with the expected magic/version/header."""


class CheckpointCorruptionError(PersistenceError):
    """Checkpoint header and payload disagree (truncation, bad offsets)."""


class ValidationError(CptlabError):
    """Data violates a structural invariant (shapes, lengths, duplicates)."""


class CongruenceError(ValidationError):
    """Two parameter sets differ in names, shapes, or dtypes."""


class MalformedExampleError(ValidationError):
    """A benchmark example violates its task's structural invariant."""


class SequencingError(CptlabError):
    """An operation was applied out of step order."""


class TrainingDivergenceError(CptlabError):
    """Non-finite loss or gradients during training (CLI exit code 3)."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (at step {step})")
        self.step = step


class CorpusError(CptlabError):
    """Empty corpus, or an exhausted non-cycling stream."""


class AlignmentError(CptlabError):
    """Metric files cannot be aligned on a common step grid."""

    def __init__(self, message: str, missing_steps: dict):
        super().__init__(message)
        self.missing_steps = missing_steps
