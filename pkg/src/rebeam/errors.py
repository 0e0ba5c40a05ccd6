"""Exception types raised across the package."""


class RebeamError(Exception):
    """Base class for all package-specific errors."""


class DegeneratePoint(RebeamError):
    """Point lies on (or numerically at) the sensor's vertical axis; azimuth undefined."""


class EmptyCloud(RebeamError):
    """Operation requires at least one point."""


class TooFewDistinctZeniths(RebeamError):
    """Clustering requested more beams than there are distinct zenith values."""


class SingleBeam(RebeamError):
    """Beam densities / gap probabilities need at least two beams."""


class EmptyBeam(RebeamError):
    """Gap interpolation requires both bounding beams to contain points."""


class ZeroNormFeature(RebeamError):
    """Cosine similarity is undefined for a zero-norm feature vector."""


class DimensionMismatch(RebeamError):
    """Matrix / feature shapes are inconsistent."""


class LengthMismatch(RebeamError):
    """Parameter vectors have different lengths."""


class DegenerateDenominator(RebeamError):
    """Closed-gap metric is undefined when oracle and source scores coincide."""


class MalformedFile(RebeamError):
    """Binary point-cloud file has a bad length or non-finite payload."""


class SchemaViolation(RebeamError):
    """JSON document does not match the expected schema."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
