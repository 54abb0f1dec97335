"""Exception types shared across the package."""


class GmcError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(GmcError):
    pass


class EmptyDataset(GmcError):
    pass


class NonPositiveAlpha(GmcError):
    pass


class InvalidDelta(GmcError):
    pass


class InsufficientFolds(GmcError):
    pass


class UnknownGroupId(GmcError):
    pass


class PotentialIncrease(GmcError):
    """An accepted update increased the potential: the (s, potential) pair is mis-specified."""


class KindMismatch(GmcError):
    pass


class NonFiniteInput(GmcError):
    pass


class InvalidBox(GmcError):
    pass


class UnknownNode(GmcError):
    pass


class EmptyCalibration(GmcError):
    pass


class NoPositivePixels(GmcError):
    pass


class EmptyClass(GmcError):
    pass


class NonPositiveGamma(GmcError):
    pass


class DimensionNotOne(GmcError):
    pass


class SchemaError(GmcError):
    pass


class InvariantViolation(GmcError):
    pass


class InvalidSpec(GmcError):
    pass
