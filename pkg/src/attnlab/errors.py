"""Exception types raised by attnlab."""


class AttnLabError(ValueError):
    """Base class for every error raised by this package."""


class InvalidParam(AttnLabError):
    pass


class DimensionTooSmall(AttnLabError):
    pass


class TooFewTokens(AttnLabError):
    pass


class InfeasibleSpec(AttnLabError):
    pass


class DegenerateToken(AttnLabError):
    """A token with zero norm; its direction is undefined."""


class NormCollapse(AttnLabError):
    pass


class BudgetExceeded(AttnLabError):
    pass


class DegeneratePair(AttnLabError):
    """Two input directions coincide, so an angle ratio is undefined."""
