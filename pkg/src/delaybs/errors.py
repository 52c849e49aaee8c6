"""Exception hierarchy shared by every module."""


class DelayBSError(Exception):
    """Base class for all package errors."""


# coefficients
class NonPositiveDelay(DelayBSError):
    pass


class SlopeViolation(DelayBSError):
    pass


class OutOfRange(DelayBSError):
    pass


class NonMonotone(DelayBSError):
    pass


class RetryExhausted(DelayBSError):
    pass


# kernel
class NoConvergence(DelayBSError):
    pass


class GeometryError(DelayBSError):
    pass


class DegenerateSlope(DelayBSError):
    pass


class SingleBranch(DelayBSError):
    pass


# simulator / controller
class CflViolation(DelayBSError):
    pass


class NonFinite(DelayBSError):
    pass


class GridMismatch(DelayBSError):
    pass


class RegionGeometry(DelayBSError):
    pass


class InsufficientSnapshots(DelayBSError):
    pass


# operator learning
class ScenarioFailure(DelayBSError):
    pass


class Divergence(DelayBSError):
    """Training loss became non-finite.

    ``checkpoint`` holds the last model whose loss was finite.
    """

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class ShapeMismatch(DelayBSError):
    pass


class FormatVersionMismatch(DelayBSError):
    pass


class CorruptFile(DelayBSError):
    pass


# analysis
class DegeneratePair(DelayBSError):
    pass


class DegenerateBounds(DelayBSError):
    pass


class MissingShadowLabels(DelayBSError):
    pass


# cli
class BadUsage(DelayBSError):
    pass
