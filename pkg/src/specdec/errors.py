"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, everything else -> 3.
"""


class SpecdecError(Exception):
    pass


class ConfigError(SpecdecError):
    """Invalid configuration value; message names the offending field."""


class AlignmentError(SpecdecError):
    """Cache/hidden-state misalignment; message identifies (layer, position)."""


class ProtocolError(SpecdecError):
    """Operation that would violate commit semantics (e.g. un-committing)."""


class CapacityError(SpecdecError):
    """Sequence would exceed the model's maximum length."""


class UndefinedRatioError(SpecdecError):
    """Throughput ratio requested against a zero-cost or empty ledger."""
