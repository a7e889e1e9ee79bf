"""Exception types shared across the package."""


class ClogcdError(Exception):
    """Base class for all package errors."""


class DataError(ClogcdError):
    """Bad dataset input: missing paths, unreadable images, empty classes."""


class ConfigError(ClogcdError):
    """Invalid run configuration. Carries every problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingDivergedError(ClogcdError):
    """Non-finite loss or gradient encountered; stage aborted."""
