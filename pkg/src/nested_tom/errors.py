"""Exception types shared across the package."""


class NestedTomError(Exception):
    """Base class for all package errors."""


class AllWeightsZero(NestedTomError):
    """Every particle weight collapsed to zero (impossible evidence)."""


class SpaceMismatch(NestedTomError):
    """Two posteriors refer to different hypothesis spaces."""


class UnsupportedLevel(NestedTomError):
    """Inference requested at a reasoning level this build does not support."""


class DimMismatch(NestedTomError):
    """Network input/output dimensions do not line up."""


class NonFiniteLoss(NestedTomError):
    """Training loss became NaN or infinite."""


class VersionMismatch(NestedTomError):
    """Checkpoint file carries an unsupported format version."""


class CorruptFile(NestedTomError):
    """Checkpoint or data file cannot be parsed."""


class IllegalAction(NestedTomError):
    """An action was applied in a state where it is not allowed."""


class MissingModel(NestedTomError):
    """A required trained checkpoint was not supplied."""

    exit_code = 3


class SchemaError(NestedTomError):
    """Serialized episode data does not match the expected schema."""
