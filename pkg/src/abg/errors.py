"""Exception hierarchy shared by every module of the package."""


class ABGError(Exception):
    """Base class for all errors raised by abg."""


# numeric core
class ShapeMismatch(ABGError, ValueError):
    pass


class NonFiniteError(ABGError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class ZeroNormSlice(ABGError, ValueError):
    pass


class NotScalar(ABGError, ValueError):
    pass


class NonFiniteEvaluation(ABGError, FloatingPointError):
    pass


class MissingGradient(ABGError, KeyError):
    pass


# model pieces
class EmptySequence(ABGError, ValueError):
    pass


class ScaleOutOfRange(ABGError, ValueError):
    pass


class NotASimplex(ABGError, ValueError):
    pass


class LabelOutOfRange(ABGError, ValueError):
    pass


class LevelMismatch(ABGError, ValueError):
    pass


class NonFiniteLoss(ABGError, FloatingPointError):
    pass


class EmptyDataset(ABGError, ValueError):
    pass


# data and files
class InvalidSpec(ABGError, ValueError):
    pass


class BadMagic(ABGError, ValueError):
    pass


class VersionMismatch(ABGError, ValueError):
    pass


class TruncatedFile(ABGError, ValueError):
    pass


class DimMismatch(ABGError, ValueError):
    pass


class BatchLargerThanSet(ABGError, ValueError):
    pass


# command line
class ConfigError(ABGError, ValueError):
    pass


class IoError(ABGError, OSError):
    pass


class SnapshotMismatch(ABGError, ValueError):
    pass
