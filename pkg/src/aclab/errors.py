"""Exception hierarchy shared by every aclab module."""


class AclabError(Exception):
    """Base class for all library errors."""


class DomainError(AclabError, ValueError):
    """An input is outside the domain of the operation (non-finite, negative time, ...)."""


class HypothesisError(AclabError, ValueError):
    """A quoted hypothesis of a formula or strategy does not hold for the inputs."""


class NumericOverflow(AclabError, OverflowError):
    """An exponential left the float64 range; the true value is not representable."""


class NumericError(AclabError, ArithmeticError):
    """Quadrature or another numeric procedure failed to reach its tolerance."""


class StrategyError(AclabError):
    """A controller produced an invalid decision or reached an inconsistent state."""


class GridError(AclabError):
    """The time grid cannot be advanced (step underflow, inconsistent horizon)."""


class SchemaError(AclabError, ValueError):
    """A trajectory log or config document is malformed."""


class ConfigError(SchemaError):
    """A run configuration failed validation."""
