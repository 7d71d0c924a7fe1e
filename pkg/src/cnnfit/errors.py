"""Exception hierarchy shared by every stage of the toolchain."""


class CnnfitError(Exception):
    """Base class for all errors raised by cnnfit."""


# ingest
class DecodeError(CnnfitError):
    pass


class MalformedWire(DecodeError):
    pass


class UnsupportedDtype(DecodeError):
    pass


class MissingGraph(DecodeError):
    pass


class UnsupportedFeature(DecodeError):
    pass


class AttrKindMismatch(CnnfitError):
    pass


# graph-ir
class LoweringError(CnnfitError):
    pass


class UnsupportedOp(LoweringError):
    pass


class DanglingInput(LoweringError):
    pass


class ShapeMismatch(LoweringError):
    pass


class DegenerateShape(LoweringError):
    pass


# cost model / dse
class RankDeficient(CnnfitError):
    pass


class EmptySpace(CnnfitError):
    pass


class NoFeasibleOption(CnnfitError):
    pass


class UnknownTarget(CnnfitError):
    pass


# simulator
class ScheduleGap(CnnfitError):
    pass


class InputShapeError(CnnfitError):
    pass


# serialization
class BundleError(CnnfitError):
    pass


class VersionMismatch(BundleError):
    pass


class CorruptBlob(BundleError):
    pass


class SinkFailure(BundleError):
    pass


class ConfigError(CnnfitError):
    pass
