"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
DataFormatError and OSError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or unparseable run configuration."""


class NumericError(RuntimeError):
    """Numerical failure (non-finite loss, collapsed fit) that aborts a run."""


class DataFormatError(ValueError):
    """Malformed on-disk artifact (dataset, checkpoint, mask, or metadata file)."""
