"""Global floating-point precision switch.

The whole stack runs in one precision at a time: 64-bit for verification work
(gradient checks, oracle comparisons), 32-bit for training. The switch applies
to tensors created after the call; mixing is not supported.
"""

import numpy as np

from .errors import ConfigError

_DTYPE = np.float64


def set_precision(bits: int) -> None:
    """Select the global float width. ``bits`` must be 32 or 64."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ConfigError(f"precision must be 32 or 64, got {bits!r}")


def dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def bits() -> int:
    return 64 if _DTYPE is np.float64 else 32
