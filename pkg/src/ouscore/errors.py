"""Exception hierarchy shared by every module."""


class OuscoreError(Exception):
    """Base class for all library errors."""


class ContractViolation(OuscoreError, ValueError):
    """An argument broke a documented precondition."""


class RangeError(OuscoreError, OverflowError):
    """A density ratio overflowed double precision."""


class CapabilityError(OuscoreError, TypeError):
    """The requested oracle is unavailable for this target family."""


class NumericError(OuscoreError, FloatingPointError):
    """A quantity that is positive in exact arithmetic came out non-positive."""


class DivergenceError(OuscoreError, FloatingPointError):
    """A simulated path produced a non-finite state."""


class ImprobableEventError(OuscoreError, RuntimeError):
    """Repeated rejection of an event with overwhelming probability."""


class DegenerateDataError(OuscoreError, ValueError):
    """Sample statistics are singular."""
