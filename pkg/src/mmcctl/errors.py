"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid physical parameters or run configuration.

    ``field`` names the offending configuration entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class SingularSystemError(RuntimeError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class InfeasibleError(RuntimeError):
    """An optimization problem has no (strictly) feasible point.

    ``diagnostics`` carries whatever the caller can report about the
    closest achievable point (residuals, margins, violating constraints).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SimulationDiverged(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
