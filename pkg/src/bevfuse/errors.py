"""Exception taxonomy shared across the package.

Every error carries a short machine-readable ``category`` that the CLI uses
to emit single-line diagnostics.
"""


class BevFuseError(Exception):
    category = "internal"


class ShapeError(BevFuseError):
    """Operand dimensions are incompatible."""

    category = "shape"


class ConfigError(BevFuseError):
    """A setting or structural constraint is violated."""

    category = "config"


class UsageError(BevFuseError):
    """An API was called outside its contract."""

    category = "usage"


class NumericsError(BevFuseError):
    """A non-finite value appeared in a computation."""

    category = "numerics"


class ParseError(BevFuseError):
    """A file could not be parsed; the message includes the location."""

    category = "parse"


class BehindCameraError(BevFuseError):
    """Point lies behind the image plane; the caller decides how to drop it."""

    category = "geometry"


class InternalError(BevFuseError):
    """An invariant the implementation is supposed to guarantee was broken."""

    category = "internal"
