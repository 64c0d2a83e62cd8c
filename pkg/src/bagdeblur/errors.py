"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and
CheckpointError -> 2, NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class DataError(RuntimeError):
    """Dataset layout, image file, or kernel specification problem."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is missing, corrupt, or incompatible."""


class NumericalError(RuntimeError):
    """A non-finite loss or gradient aborted a training step."""
