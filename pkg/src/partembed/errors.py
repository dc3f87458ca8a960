"""Exception types shared across the package."""


class PartembedError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PartembedError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ParseError(PartembedError, ValueError):
    """A scene-graph or shape document could not be parsed."""


class SchemaError(ParseError):
    """A JSON document does not match the native shape schema."""


class UndefinedReferenceError(ParseError):
    """A scene-graph node references geometry that is not defined."""


class UnsupportedPrimitiveError(ParseError):
    """A geometry primitive other than triangles was encountered."""


class GeometryError(PartembedError, ValueError):
    """A mesh or point cloud is degenerate for the requested operation."""


class AlignmentError(GeometryError):
    """Rigid alignment failed (degenerate correspondence covariance)."""


class SamplingError(PartembedError, ValueError):
    """Triplets cannot be drawn from the given shape."""


class OptimizerError(PartembedError, ValueError):
    """The optimizer received non-finite gradients."""


class TrainingError(PartembedError, RuntimeError):
    """A training run cannot proceed (no usable data, etc.)."""


class ConfigurationError(PartembedError, ValueError):
    """A run configuration is inconsistent or incomplete."""
