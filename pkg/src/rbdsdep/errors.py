"""Exception types shared across the package."""


class RbdsdepError(Exception):
    """Base class for errors raised by this package."""


class ParseError(RbdsdepError):
    """Expression text could not be parsed.

    Carries the byte offset of the offending token in ``offset``.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EvalError(RbdsdepError):
    """Expression evaluation failed (missing variable, division by zero,
    square root of a negative value, or a non-finite result)."""


class ConfigError(RbdsdepError):
    """A problem description or config file violates a precondition."""


class SolverError(RbdsdepError):
    """A solve could not be carried out (budget exceeded, ill-conditioned
    regression, inconsistent driver shapes)."""


class EnvelopeError(RbdsdepError):
    """Envelope evaluation failed: query point outside the declared box,
    or the minimizer landed on the box boundary (box too small)."""
