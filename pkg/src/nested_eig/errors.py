"""Exception types shared across the package."""


class NestedEigError(Exception):
    """Base class for package errors."""


class ConfigError(NestedEigError):
    """Malformed or inconsistent run configuration."""


class ForwardModelError(NestedEigError):
    """Forward map returned a non-finite value; carries the offending inputs."""

    def __init__(self, message, theta=None, phi=None):
        super().__init__(message)
        self.theta = theta
        self.phi = phi


class MapSolverError(NestedEigError):
    """A MAP solve failed to converge or produced a non-repairable Hessian."""


class AllocationError(NestedEigError):
    """The sample-allocation problem is infeasible for the given constants."""


class PilotError(NestedEigError):
    """Pilot constant estimation failed (too many degenerate batches, ...)."""


class OracleUnavailableError(NestedEigError):
    """No analytic reference value exists for the requested model."""
