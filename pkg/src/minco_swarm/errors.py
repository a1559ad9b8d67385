"""Exception types raised across the package."""


class MincoError(Exception):
    pass


class NonPositiveDuration(MincoError, ValueError):
    pass


class SingularSystem(MincoError, ArithmeticError):
    pass


class OutOfDomain(MincoError, ValueError):
    pass


class ShapeMismatch(MincoError, ValueError):
    pass


class ClockSkew(MincoError, ValueError):
    """A peer trajectory lies entirely after the own trajectory; clocks disagree."""


class NoPath(MincoError):
    pass


class DegenerateDirection(MincoError):
    pass


class PlanFailed(MincoError):
    def __init__(self, message, postcheck=None):
        super().__init__(message)
        self.postcheck = postcheck


class ScenarioInvalid(MincoError, ValueError):
    pass


class WireError(MincoError, ValueError):
    pass


class CrcMismatch(WireError):
    pass


class TruncatedMessage(WireError):
    pass


class VersionMismatch(WireError):
    pass


class MalformedMessage(WireError):
    pass
