"""Exception types shared across the package."""


class CovidCapsError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CovidCapsError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""


class ParameterError(CovidCapsError, ValueError):
    """A hyperparameter or argument value is outside its valid range."""


class ContractError(CovidCapsError, ValueError):
    """An API precondition was violated (non-scalar backward, missing
    gradients, out-of-range capsule lengths, empty inputs)."""


class StateError(CovidCapsError, RuntimeError):
    """An operation was invoked before the state it needs exists."""


class BuildError(CovidCapsError, ValueError):
    """Model assembly failed; the message names the offending layer."""


class SelectorError(CovidCapsError, ValueError):
    """A trainability selector matched no parameters."""


class ManifestError(CovidCapsError, ValueError):
    """A dataset manifest file is malformed."""


class VocabularyError(CovidCapsError, ValueError):
    """A label is not part of the active scheme's vocabulary."""


class SchemeError(CovidCapsError, ValueError):
    """A manifest's labeling scheme does not fit the requested operation."""


class SplitError(CovidCapsError, ValueError):
    """A stratified split cannot be formed from the given manifest."""


class CheckpointFormatError(CovidCapsError, ValueError):
    """A checkpoint file is corrupt; the message carries the byte offset."""


class ConfigError(CovidCapsError, ValueError):
    """Training configuration is inconsistent (e.g. scheme/head mismatch)."""


class TrainingDivergedError(CovidCapsError, RuntimeError):
    """The training loss became non-finite; message locates epoch/batch."""


class ImageReadError(CovidCapsError, OSError):
    """An image file could not be read or decoded."""
