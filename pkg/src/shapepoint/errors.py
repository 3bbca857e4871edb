"""Exception taxonomy shared by all shapepoint modules."""


class ShapePointError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ShapePointError):
    """Invalid configuration value or combination."""


class GeometryError(ShapePointError):
    """Mask/mesh geometry violates a precondition (empty mask, boundary contact, ...)."""


class MetricError(ShapePointError):
    """Metric precondition violated (empty input, dimension mismatch, ...)."""


class SolverError(ShapePointError):
    """Iterative solver failed to reach its certified tolerance."""


class FormatError(ShapePointError):
    """On-disk artifact is malformed; the message names the offending field."""


class ShapeError(ShapePointError):
    """Tensor shape contract violated; the message names the offending axis."""


class TrainingError(ShapePointError):
    """Training aborted (non-finite loss, ...)."""


class HarnessError(ShapePointError):
    """Experiment harness misuse (mismatched case sets, missing artifacts)."""


class InternalError(ShapePointError):
    """Invariant violated inside the package itself."""
