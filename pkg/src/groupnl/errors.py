"""Exception types shared across the package."""


class GroupNLError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(GroupNLError, ValueError):
    pass


class NonDivisibleChannels(GroupNLError, ValueError):
    pass


class GroupMismatch(GroupNLError, ValueError):
    pass


class ArityMismatch(GroupNLError, ValueError):
    pass


class InvalidSpec(GroupNLError, ValueError):
    """A LayerSpec/ModelSpec violates one of its invariants.

    ``field`` names the offending field as a dotted path when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NonScalarLoss(GroupNLError, ValueError):
    pass


class UnknownArch(GroupNLError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown architecture"


class DivergedLoss(GroupNLError, FloatingPointError):
    pass


class BuildFailure(GroupNLError, RuntimeError):
    pass
