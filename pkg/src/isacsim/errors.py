"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(ValueError):
    """A requested quantity is outside its mathematical domain."""


class InfeasibleDelay(ValueError):
    """No physical scatterer range can realize the requested path delay."""


class SingularSubmatrix(RuntimeError):
    """A support-restricted system matrix is numerically singular."""


class EmptyEstimate(RuntimeError):
    """A metric was requested for an estimate with no detected entities."""


class NumericalFailure(RuntimeError):
    """Unrecoverable numerical breakdown inside an algorithm run."""
