"""Exception hierarchy shared by every subsystem.

Each class maps to one CLI exit code so failures surface with a stable,
scriptable status (see kvdit.cli).
"""


class KvditError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(KvditError):
    """Tensor extents do not line up (matmul inner dims, channel counts...)."""

    exit_code = 2


class LayoutError(KvditError):
    """A 2D token layout constraint is violated (e.g. H not divisible by R)."""

    exit_code = 2


class ConfigError(KvditError):
    """Invalid or inconsistent configuration / usage."""

    exit_code = 2


class NumericalError(KvditError):
    """Non-finite values or a failed numerical check."""

    exit_code = 3


class IOFailure(KvditError):
    """File could not be read/written or has a bad format."""

    exit_code = 4
