"""Kernel backend selection.

Two interchangeable backends provide the hot kernels (conv3d/deconv3d,
selective scan, radix-2 FFT butterflies):

* ``native`` — Cython extension (:mod:`emnet.kernels._core`), used when the
  compiled module imports cleanly;
* ``pure``   — numpy fallback (:mod:`emnet.kernels.pure`), always available.

Set ``EMNET_KERNELS=pure`` or ``EMNET_KERNELS=native`` to force a choice at
import time; ``use_backend`` switches at runtime (the benchmark harness uses it
to compare the two).
"""

import contextlib
import os

from ..errors import ConfigError
from . import pure

try:
    from . import _core as native
except ImportError:  # extension not built: pure fallback
    native = None


def _resolve(name: str):
    if name == "pure":
        return pure
    if name == "native":
        if native is None:
            raise ConfigError("native kernel backend requested but the extension is not built")
        return native
    if name == "auto":
        return native if native is not None else pure
    raise ConfigError(f"unknown kernel backend {name!r} (expected auto|pure|native)")


_active = _resolve(os.environ.get("EMNET_KERNELS", "auto"))

BACKEND = _active.NAME
AVAILABLE = ("pure",) if native is None else ("pure", "native")


def active():
    """The module object providing the kernel functions currently in use."""
    return _active


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch the kernel backend (for benchmarks/parity tests)."""
    global _active
    prev = _active
    _active = _resolve(name)
    try:
        yield _active
    finally:
        _active = prev
