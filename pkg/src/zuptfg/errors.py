"""Exception hierarchy shared by all modules."""


class ZuptFgError(Exception):
    """Base class for every error raised by this package."""


class NearSingularInput(ZuptFgError, ValueError):
    pass


class BelowHorizon(ZuptFgError, ValueError):
    pass


class UnknownSatellite(ZuptFgError, KeyError):
    pass


class DuplicateKey(ZuptFgError, KeyError):
    pass


class InvalidKey(ZuptFgError, ValueError):
    pass


class UnknownVariable(ZuptFgError, KeyError):
    pass


class NonPositiveDefiniteNoise(ZuptFgError, ValueError):
    pass


class DimensionMismatch(ZuptFgError, ValueError):
    pass


class SingularNormalEquations(ZuptFgError, ArithmeticError):
    pass


class NonFiniteResidual(ZuptFgError, ArithmeticError):
    pass


class NotStationaryPair(ZuptFgError, ValueError):
    pass


class NonFiniteInput(ZuptFgError, ValueError):
    pass


class EmptyWindow(ZuptFgError, ValueError):
    pass


class InfeasibleSchedule(ZuptFgError, ValueError):
    pass


class EpochMismatch(ZuptFgError, ValueError):
    pass


class EmptySeries(ZuptFgError, ValueError):
    pass
