"""Shared exception types."""


class ConfigurationError(ValueError):
    """A run was configured with inconsistent or unsupported parameters."""


class ScenarioError(ConfigurationError):
    """A scenario file failed validation; the message names the field."""


class StepRejected(RuntimeError):
    """An explicit step violated its stability precondition (CFL etc.)."""


class SolverError(RuntimeError):
    """The iterative pressure solver failed to converge."""
