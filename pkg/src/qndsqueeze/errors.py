"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can report a
machine-readable failure reason and pick an exit code.
"""


class SqueezeError(Exception):
    category = "error"
    exit_code = 1


class DimensionError(SqueezeError, ValueError):
    category = "dimension"
    exit_code = 2


class PositivityViolation(SqueezeError, ArithmeticError):
    """Density matrix lost positivity; usually means the step is too large."""

    category = "positivity"
    exit_code = 3


class StepSizeError(SqueezeError, ValueError):
    """Fixed step exceeds the explicit integrator's stability bound."""

    category = "step-size"
    exit_code = 3

    def __init__(self, message, max_stable_dt=None):
        super().__init__(message)
        self.max_stable_dt = max_stable_dt


class GainSingularity(SqueezeError, ArithmeticError):
    """<J_x> collapsed, so the state-based gain is undefined."""

    category = "gain-singularity"
    exit_code = 4


class DegenerateDirection(SqueezeError, ArithmeticError):
    category = "degenerate-direction"
    exit_code = 5


class MinimumAtBoundary(SqueezeError, ValueError):
    category = "minimum-at-boundary"
    exit_code = 6


class InsufficientData(SqueezeError, ValueError):
    category = "insufficient-data"
    exit_code = 7


class ConfigError(SqueezeError, ValueError):
    category = "config"
    exit_code = 8
