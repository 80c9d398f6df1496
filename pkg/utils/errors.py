"""
Exception hierarchy shared by the library and the CLI.
Each error carries a machine-readable code and the process exit code main.py uses.
"""


class RobustnessError(Exception):
    """Base class; anything not otherwise classified is an internal error."""

    code = "internal"
    exit_code = 5


class ConfigError(RobustnessError):
    code = "config"
    exit_code = 2


class DependencyError(ConfigError):
    """A stage needs artifacts from an upstream stage that are missing or stale."""

    code = "dependency"

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"missing output of stage '{stage}'")


class InputError(RobustnessError, ValueError):
    code = "input"
    exit_code = 2


class ProblemSpecError(InputError):
    code = "problem-spec"


class PerturbationSpecError(InputError):
    code = "perturbation-spec"


class QueryError(InputError):
    code = "query"


class AbsoluteContinuityError(InputError):
    code = "absolute-continuity"


class InfeasibilityError(RobustnessError):
    code = "infeasible"
    exit_code = 3


class BoundViolationError(RobustnessError):
    code = "bound-violation"
    exit_code = 4


class StageError(RobustnessError):
    """Wraps the error that aborted a pipeline stage, keeping its codes."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", RobustnessError.code)
        self.exit_code = getattr(cause, "exit_code", RobustnessError.exit_code)
        super().__init__(f"stage '{stage}' failed [{self.code}]: {cause}")


class NonIntegrableWarning(UserWarning):
    """The density ratio is not square-integrable, or its estimator has infinite variance."""


class LowPowerWarning(UserWarning):
    """Too few ensemble members for the bootstrap statistics to mean much."""
