"""Typed exceptions raised across the package."""


class CardsegError(Exception):
    """Base class for every error raised by cardseg."""


# tensor engine
class ShapeMismatch(CardsegError):
    pass


class DivisionDomain(CardsegError):
    pass


class AxisOutOfRange(CardsegError):
    pass


class NonScalarRoot(CardsegError):
    pass


class NonFiniteEvaluation(CardsegError):
    pass


# neural-net operators
class ChannelMismatch(CardsegError):
    pass


class KernelTooLarge(CardsegError):
    pass


class InputTooSmall(CardsegError):
    pass


class SpatialMismatch(CardsegError):
    pass


# losses and metrics
class NotOneHot(CardsegError):
    pass


class NotNormalized(CardsegError):
    pass


class WeightLengthMismatch(CardsegError):
    pass


class EmptyMask(CardsegError):
    pass


class ZeroEDV(CardsegError):
    pass


class DegenerateVariance(CardsegError):
    pass


# file formats
class BadMagic(CardsegError):
    pass


class UnsupportedDatatype(CardsegError):
    pass


class TruncatedPayload(CardsegError):
    pass


class VersionUnsupported(CardsegError):
    pass


class CorruptEntry(CardsegError):
    pass


# model / data construction
class InvalidConfig(CardsegError):
    pass


class InvalidGeometry(CardsegError):
    pass


class TooFewCases(CardsegError):
    pass


# training
class NonFiniteGradient(CardsegError):
    pass


class ConfigMismatch(CardsegError):
    pass
