"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
StageError -> 4.
"""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or infeasible."""


class DataError(ValueError):
    """An input file or in-memory dataset violates its format contract."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class UndefinedMetricError(ValueError):
    """The requested metric is undefined for the given inputs."""
