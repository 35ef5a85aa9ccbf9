"""Exception types shared across the package."""


class IconsimError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(IconsimError):
    """A manifest file could not be parsed.

    ``line`` is the 1-based line number of the offending record, or None
    for file-level problems.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateAppIdError(ManifestError):
    """Two manifest records share the same app_id."""


class ImageDecodeError(IconsimError):
    """An icon file could not be decoded to a 3-channel RGB image."""


class BackboneError(IconsimError):
    """Backbone graph failed to load or produced invalid activations."""


class DimensionMismatchError(IconsimError):
    """Operands have incompatible shapes for the requested operation."""


class AsymmetricMatrixError(IconsimError):
    """A matrix expected to be symmetric is not, beyond tolerance."""


class UnsupportedNormalizationError(IconsimError):
    """Distance normalization requested for a metric without a finite bound."""


class IncomparableDescriptorsError(IconsimError):
    """Keypoint-set distance is undefined because one side has no descriptors."""


class StoreError(IconsimError):
    """Embedding store file is malformed or inconsistent with its sidecar."""


class ConfigMismatchError(IconsimError):
    """Artifacts produced under different pipeline configurations were mixed."""


class KneeInputError(IconsimError):
    """Threshold/rate curve violates the preconditions of knee detection."""


class EvaluationError(IconsimError):
    """Evaluation inputs are inconsistent (e.g. a group member is not indexed)."""
