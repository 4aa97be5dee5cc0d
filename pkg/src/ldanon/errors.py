class AnonError(Exception):
    """Base class for errors raised by ldanon."""


class DomainError(AnonError, ValueError):
    """A scalar argument is outside its mathematical domain."""


class ContractViolation(AnonError, ValueError):
    """Inputs or adapter outputs break a shape or interface contract."""


class ConfigError(AnonError, ValueError):
    pass


class NoCandidateError(AnonError, LookupError):
    """No identity in the pool satisfies the minimum-distance constraint."""


class ProtocolError(AnonError, LookupError):
    pass


class UndefinedMetricError(AnonError, ValueError):
    pass
