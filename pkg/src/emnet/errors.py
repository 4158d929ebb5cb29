"""Error taxonomy shared across the package.

Every raised condition carries a short machine-readable ``code`` so the CLI can
emit uniform one-line diagnostics (``error: <code>: <message>``).
"""


class EmnetError(Exception):
    """Base class for every error raised by this package."""

    code = "internal"


class ShapeError(EmnetError, ValueError):
    """Operand shapes/extents are inconsistent with an operation's contract."""

    code = "shape"


class ConfigError(EmnetError, ValueError):
    """A configuration violates a named structural invariant."""

    code = "config"


class DataError(EmnetError, ValueError):
    """Input data is malformed (labels out of range, bad buffers, bad specs)."""

    code = "data"


class TrainError(EmnetError, RuntimeError):
    """Training cannot proceed (missing gradients, non-finite loss)."""

    code = "train"


class CheckpointError(EmnetError, ValueError):
    """A checkpoint file is corrupt, truncated, or from an unknown format."""

    code = "checkpoint"
