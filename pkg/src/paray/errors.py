"""Exception types shared across the toolkit.

Invalid arguments raise plain ``ValueError``. The subclasses below exist so the
CLI can map failures onto distinct exit codes.
"""


class ConfigError(ValueError):
    """An experiment config is malformed; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class PreconditionError(ValueError):
    """Inputs are individually valid but violate an operation's precondition."""


class UndefinedMetricError(ValueError):
    """A metric cannot be evaluated (e.g. zero background variance)."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration, value):
        super().__init__(f"loss became non-finite ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.value = value
