"""Exception hierarchy shared by all semflow modules."""


class SemflowError(Exception):
    """Base class for every error raised by semflow."""


# imagefeat
class NotFound(SemflowError, FileNotFoundError):
    pass


class DecodeFailed(SemflowError):
    pass


class UnsupportedFormat(SemflowError):
    pass


class ImageTooSmall(SemflowError):
    pass


# statstore
class ChannelMismatch(SemflowError):
    pass


class ImageSmallerThanBandwidth(SemflowError):
    pass


class ShapeMismatch(SemflowError):
    pass


class InsufficientData(SemflowError):
    pass


class BandwidthTooSmall(SemflowError):
    pass


class NonFinite(SemflowError):
    pass


class NotPositiveDefinite(SemflowError):
    pass


# binary file formats (stats, flow, feature dumps)
class FileFormatError(SemflowError):
    pass


class IoError(SemflowError, OSError):
    pass


class BadMagic(FileFormatError):
    pass


class VersionMismatch(FileFormatError):
    pass


class CorruptPayload(FileFormatError):
    pass


# exemplar
class DimensionMismatch(SemflowError):
    pass


class EmptyWindow(SemflowError):
    pass


# flowopt
class FlowOutsideVolume(SemflowError):
    pass


class AllInfiniteCosts(SemflowError):
    pass


class PyramidTooDeep(SemflowError):
    pass


# evalkit
class ParseError(SemflowError):
    pass


class OutOfBounds(SemflowError):
    pass


class TooFewAnnotators(SemflowError):
    pass


class TooFewPoints(SemflowError):
    pass


class SingularCovariance(SemflowError):
    pass


class MissingPrediction(SemflowError):
    pass


# cli
class ConfigError(SemflowError):
    pass


class EmptyDistances(SemflowError):
    pass
