"""Exception types raised across the package."""


class CFCDError(ValueError):
    pass


class ZeroVector(CFCDError):
    pass


class InvalidP(CFCDError):
    pass


class NonFinite(CFCDError):
    pass


class InvalidLabel(CFCDError):
    pass


class DegenerateMedian(CFCDError):
    pass


class InvalidTau(CFCDError):
    pass


class EmptyCandidates(CFCDError):
    pass


class InsufficientClass(CFCDError):
    pass


class ShapeMismatch(CFCDError):
    pass


class StaleRecord(CFCDError):
    pass


class ConfigError(CFCDError):
    pass


class EmptyBenchmark(CFCDError):
    pass


class SpecError(CFCDError):
    pass
