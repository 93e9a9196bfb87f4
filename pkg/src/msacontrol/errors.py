"""Exception types shared across the solver stack."""


class ConfigurationError(ValueError):
    """Invalid problem setup, dimensions, or run parameters."""


class EvaluationError(RuntimeError):
    """A user-supplied coefficient produced a non-finite or malformed value."""


class SimulationError(RuntimeError):
    """Path simulation blew up; message carries path/step indices."""


class NumericalError(RuntimeError):
    """A linear-algebra or overflow failure inside a solver."""
