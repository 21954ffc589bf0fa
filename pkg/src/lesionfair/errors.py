"""Exception hierarchy shared across the pipeline.

Each class carries the CLI exit code it maps to.
"""


class LesionFairError(Exception):
    exit_code = 2


class ValidationError(LesionFairError, ValueError):
    """Structurally malformed input (bad LP, bad config, bad argument)."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class FormatError(LesionFairError):
    """Tabular input is missing columns or cannot be read."""


class DataError(LesionFairError):
    """Input parses but violates a data invariant (duplicate id, unknown reference)."""


class PreconditionError(LesionFairError, ValueError):
    pass


class CapacityError(LesionFairError):
    """A cohort cell holds fewer records than requested."""

    exit_code = 3


class InfeasibleError(LesionFairError):
    exit_code = 3


class SizeError(LesionFairError):
    """Instance too large for brute-force enumeration."""


class TrainingError(LesionFairError):
    pass


class UndefinedAUCError(LesionFairError, ValueError):
    pass
