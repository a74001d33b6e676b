"""Exception types shared across the toolkit.

Everything raised on purpose derives from MapsegError so callers (and the
CLI) can distinguish library failures from programming errors.
"""


class MapsegError(Exception):
    """Base class for all mapseg errors."""


class OutOfExtent(MapsegError):
    """Coordinate falls more than the tolerance band outside a raster."""


class MalformedDocument(MapsegError):
    """Input document cannot be parsed at all (syntax-level failure)."""


class DimensionMismatch(MapsegError):
    """Raster or mask dimensions disagree."""


class GeorefMismatch(MapsegError):
    """Two rasters that must share a georeference do not."""


class TooFewPatches(MapsegError):
    """A dataset split with a positive fraction would receive zero patches."""


class IoFailure(MapsegError):
    """File could not be read or written."""


class FormatViolation(MapsegError):
    """File exists but violates the expected on-disk format."""


class ShapeMismatch(MapsegError):
    """Tensor shapes are inconsistent with an operation's contract."""


class OddSpatialDim(MapsegError):
    """A 2x2 pooling stage would see an odd spatial dimension."""


class IncompatibleInputSize(MapsegError):
    """Network input size is incompatible with the layer graph."""


class NonFiniteInput(MapsegError):
    """An operation received NaN or infinity where finite values are required."""


class LabelOutOfRange(MapsegError):
    """A class label lies outside the valid class range."""


class NonFiniteGradient(MapsegError):
    """A gradient tensor contains NaN or infinity; the update is aborted."""


class SpecMismatch(MapsegError):
    """A checkpoint does not match the network spec it is applied to."""


class PlacementOverflow(MapsegError):
    """Synthetic scene generation could not place an object within the attempt budget."""
