"""Exception types shared across the package."""


class ColdServeError(Exception):
    """Base class for all package errors."""


class DimensionError(ColdServeError):
    """Operand shapes do not line up."""


class EmptySupportError(ColdServeError):
    """A score vector has no selectable entry (all -inf)."""


class ParameterError(ColdServeError):
    """A sampling or contrast parameter is outside its legal range."""


class MissingLayerError(ColdServeError):
    """Requested adapter target layer is not in the registry."""


class BadIndexError(ColdServeError):
    """Adapter index outside {-1} | {0..num_adapters-1}."""


class LengthError(ColdServeError):
    """Prompt or cache would exceed the model's maximum sequence length."""


class FormatError(ColdServeError):
    """Manifest is malformed or inconsistent with its config."""


class CorruptionError(ColdServeError):
    """Blob bytes do not match the manifest (length or checksum)."""


class BadRequestError(ColdServeError):
    """Serving request rejected at submission."""
