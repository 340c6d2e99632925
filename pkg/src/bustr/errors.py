"""Exception hierarchy shared across the package.

``DataError`` subclasses map to CLI exit code 3, ``DivergedLoss`` to exit
code 4; everything else is a plain bug.
"""


class BustrError(Exception):
    """Base class for all package-specific errors."""


class DataError(BustrError):
    """Invalid or inconsistent data (CLI exit code 3)."""


class UnknownDescriptor(DataError):
    """Descriptor kind is not active in the dataset configuration."""


class OutOfVocabulary(DataError):
    """Descriptor value is not in the kind's vocabulary."""


class InvalidConfig(DataError):
    """Dataset configuration is malformed or degenerate."""


class InconsistentDescriptors(DataError):
    """Descriptor combination violates schema constraints."""


class EmptyMask(DataError):
    """Lesion mask contains no foreground pixels."""


class ShapeMismatch(DataError):
    """Image and mask shapes differ."""


class TooFewSamples(DataError):
    """Not enough samples for the requested split."""


class MissingFile(DataError):
    """A referenced file or directory does not exist."""


class SchemaMismatch(DataError):
    """Persisted corpus contents disagree with their manifest."""


class BadGeometry(DataError):
    """Image geometry incompatible with the encoder configuration."""


class MissingLabel(DataError):
    """A label required for an active task is absent."""


class TaskMismatch(DataError):
    """Per-task loss keys do not match the active task set."""


class NonPositiveSize(DataError):
    """Tumor size must be strictly positive."""


class LengthMismatch(DataError):
    """Paired lists have different lengths."""


class UndefinedIdf(DataError):
    """Corpus too small to define document frequencies."""


class ZeroVariance(DataError):
    """Paired differences are constant; the t statistic is undefined."""


class IoFailure(DataError):
    """Result emission failed (empty input or unwritable target)."""


class RealizerFailure(BustrError):
    """An external report realizer returned unusable output."""


class ContextOverflow(BustrError):
    """Assembled sequence exceeds the language model context length."""


class FrozenViolation(BustrError):
    """Frozen language-model parameters changed during training."""


class DivergedLoss(BustrError):
    """Training loss became non-finite or exploded (CLI exit code 4)."""
