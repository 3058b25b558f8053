"""Exception hierarchy shared across the package."""


class PoseDiffError(Exception):
    """Base class for all errors raised by posediff."""


class BadMagic(PoseDiffError):
    pass


class ShapeMismatch(PoseDiffError, ValueError):
    pass


class BadShape(ShapeMismatch):
    pass


class NonFinite(PoseDiffError, ValueError):
    pass


class IndexOutOfRange(PoseDiffError, IndexError):
    pass


class EmptyDataset(PoseDiffError):
    pass


class InvalidRange(PoseDiffError, ValueError):
    pass


class InvalidTimestep(PoseDiffError, ValueError):
    pass


class TooFewSteps(PoseDiffError, ValueError):
    pass


class TooSmall(PoseDiffError, ValueError):
    pass


class WidthMismatch(PoseDiffError, ValueError):
    pass


class Divergence(PoseDiffError, RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


class MissingExternalEmbedding(PoseDiffError):
    pass


class MissingPose(PoseDiffError):
    pass


class CheckpointMissing(PoseDiffError, FileNotFoundError):
    pass


class EmptyPoseSequence(PoseDiffError, ValueError):
    pass


class ConfigError(PoseDiffError, ValueError):
    pass
