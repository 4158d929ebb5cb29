"""3-D FFT, spectral gating, and a naive-DFT reference.

The fast path is a separable radix-2 Cooley-Tukey transform applied along each
spatial axis of a channel-first volume; spatial extents must be powers of two.
Forward is unnormalized; the inverse carries the full 1/(H*W*D) factor, so
``ifft3(fft3(x)) == x`` and Parseval reads ``sum|x|^2 == sum|X|^2 / (H*W*D)``.

Complex data on the autodiff tape travels as a *ComplexVolume*: a real tensor
of shape [2, C, H, W, D] whose leading axis interleaves the real and imaginary
planes. ``to_complex`` converts one to a numpy complex array for analysis.

``dft3_reference`` is the deliberately naive O(n^2) oracle: an explicit loop
over output frequencies against the kernel exp(-2j*pi*(mx*x/H + my*y/W +
mz*z/D)). It shares no code with the fast path.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .kernels import active as _kern
from .tensor import Tensor, record_op

# A ComplexVolume is a Tensor shaped [2, C, H, W, D] (axis 0: real, imag).
ComplexVolume = Tensor

_tables_cache: dict = {}


def _tables(n: int, dtype):
    key = (n, np.dtype(dtype).str)
    hit = _tables_cache.get(key)
    if hit is not None:
        return hit
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    k = np.arange(n // 2, dtype=np.float64)
    cos = np.cos(2.0 * np.pi * k / n).astype(dtype)
    sin = np.sin(2.0 * np.pi * k / n).astype(dtype)
    _tables_cache[key] = (rev, cos, sin)
    return rev, cos, sin


def _check_extents(shape):
    for ax, n in enumerate(shape):
        if n < 1 or (n & (n - 1)) != 0:
            raise ShapeError(
                f"fft3: spatial extent {n} on axis {ax} is not a power of two"
            )


def _transform(re: np.ndarray, im: np.ndarray, inverse: bool, scale: bool):
    """Separable transform over axes 1..3 of [C,H,W,D] re/im buffers."""
    re = re.copy()
    im = im.copy()
    spatial = re.shape[1:]
    for ax in (1, 2, 3):
        n = re.shape[ax]
        if n == 1:
            continue
        perm, cos, sin = _tables(n, re.dtype)
        moved = np.moveaxis(re, ax, -1)
        shape = moved.shape
        r2 = np.ascontiguousarray(moved).reshape(-1, n)
        i2 = np.ascontiguousarray(np.moveaxis(im, ax, -1)).reshape(-1, n)
        _kern().fft1d_batch(r2, i2, perm, cos, sin, inverse)
        re = np.ascontiguousarray(np.moveaxis(r2.reshape(shape), -1, ax))
        im = np.ascontiguousarray(np.moveaxis(i2.reshape(shape), -1, ax))
    if scale:
        inv_n = 1.0 / (spatial[0] * spatial[1] * spatial[2])
        re = re * inv_n
        im = im * inv_n
    return re, im


def fft3(x: Tensor) -> ComplexVolume:
    """Unnormalized forward 3-D DFT of a real [C,H,W,D] volume."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"fft3 expects [C,H,W,D], got {xd.shape}")
    _check_extents(xd.shape[1:])
    re, im = _transform(xd, np.zeros_like(xd), inverse=False, scale=False)

    def bwd(g):
        rr, _ = _transform(
            np.ascontiguousarray(g[0]), np.ascontiguousarray(g[1]),
            inverse=True, scale=False,
        )
        return (rr,)

    return record_op(np.stack([re, im]), (x,), bwd)


def ifft3(X: ComplexVolume, assert_real_within: float | None = None) -> Tensor:
    """Inverse 3-D DFT (scaled by 1/(H*W*D)); returns the real plane.

    The imaginary residue is discarded. Pass ``assert_real_within`` to bound it
    first — meaningful only when the input spectrum is conjugate-symmetric (a
    real gate breaks that symmetry, so the gated path does not assert).
    """
    Xd = X.data
    if Xd.ndim != 5 or Xd.shape[0] != 2:
        raise ShapeError(f"ifft3 expects [2,C,H,W,D], got {Xd.shape}")
    _check_extents(Xd.shape[2:])
    re, im = _transform(Xd[0], Xd[1], inverse=True, scale=True)
    if assert_real_within is not None:
        resid = float(np.max(np.abs(im))) if im.size else 0.0
        if resid >= assert_real_within:
            raise ShapeError(
                f"ifft3: imaginary residue {resid:.3e} exceeds {assert_real_within:.3e} "
                "(spectrum not conjugate-symmetric?)"
            )
    ntot = Xd.shape[2] * Xd.shape[3] * Xd.shape[4]

    def bwd(g):
        rr, ii = _transform(
            np.ascontiguousarray(g), np.zeros_like(g), inverse=False, scale=False
        )
        return (np.stack([rr, ii]) * (1.0 / ntot),)

    return record_op(re, (X,), bwd)


def spectral_gate(X: ComplexVolume, A: Tensor) -> ComplexVolume:
    """Per-frequency real gate: multiplies both planes of X by A [C,H,W,D]."""
    Xd, Ad = X.data, A.data
    if Xd.shape[1:] != Ad.shape:
        raise ShapeError(
            f"spectral_gate: gate shape {Ad.shape} != spectrum shape {Xd.shape[1:]}"
        )

    def bwd(g):
        return (g * Ad[None], (g * Xd).sum(axis=0))

    return record_op(Xd * Ad[None], (X, A), bwd)


def to_complex(X) -> np.ndarray:
    """ComplexVolume (tensor or [2,...] array) -> numpy complex array."""
    d = X.data if isinstance(X, Tensor) else np.asarray(X)
    return d[0] + 1j * d[1]


def dft3_reference(x: np.ndarray) -> np.ndarray:
    """Naive O(n^2) DFT of [C,H,W,D]; the oracle for the fast transform."""
    x = np.asarray(x, dtype=np.float64)
    C, H, W, D = x.shape
    out = np.empty((C, H, W, D), dtype=np.complex128)
    xs = np.arange(H)
    ys = np.arange(W)
    zs = np.arange(D)
    for mx in range(H):
        ex = np.exp(-2j * np.pi * mx * xs / H)
        for my in range(W):
            ey = np.exp(-2j * np.pi * my * ys / W)
            for mz in range(D):
                ez = np.exp(-2j * np.pi * mz * zs / D)
                kern = ex[:, None, None] * ey[None, :, None] * ez[None, None, :]
                out[:, mx, my, mz] = (x * kern).sum(axis=(1, 2, 3))
    return out
