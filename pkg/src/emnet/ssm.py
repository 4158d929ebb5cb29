"""Selective state-space scan and the Mamba token mixer.

The scan is the diagonal-state recurrence

    h_t = exp(dt_t * A) ⊙ h_{t-1} + coef_t ⊙ u_t,   y_t = C_t · h_t + D ⊙ u_t

with h_0 = 0, run once forward over the sequence. ``coef`` follows the
discretization mode: ``euler`` uses dt*B_t, ``zoh`` uses expm1(dt*A)/A * B_t.
A is diagonal per (channel, state) and kept negative as -exp(A_log) with the
S4D-real init A_log[i] = log(1..N); dt comes from a softplus whose bias is
initialized so the step sizes span [dt_min, dt_max] log-uniformly; D starts at
one. Width conventions: d_inner = expand * d_model, d_state = 16, causal conv
width 4.

Volumes enter the mixer through ``flatten_tokens``: raster order with x
fastest, then y, then z (token t = x + H*(y + W*z) for a [C,H,W,D] volume).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError, ShapeError
from .kernels import active as _kern
from .tensor import (
    Module,
    Tensor,
    concat,
    getitem,
    matmul,
    mul,
    neg,
    param,
    record_op,
    reshape,
    silu,
    softplus,
    texp,
    transpose,
)

_MODES = {"euler": 0, "zoh": 1}


def flatten_tokens(vol: Tensor) -> Tensor:
    """[C,H,W,D] volume -> [L,C] sequence in raster order (x fastest)."""
    if vol.data.ndim != 4:
        raise ShapeError(f"flatten_tokens expects [C,H,W,D], got {vol.data.shape}")
    c = vol.data.shape[0]
    seq = reshape(transpose(vol, (0, 3, 2, 1)), (c, -1))
    return transpose(seq, (1, 0))


def unflatten_tokens(seq: Tensor, extents) -> Tensor:
    """Inverse of ``flatten_tokens`` for the given (H,W,D) extents."""
    h, w, d = extents
    if seq.data.ndim != 2 or seq.data.shape[0] != h * w * d:
        raise ShapeError(
            f"unflatten_tokens: sequence {seq.data.shape} does not match extents {extents}"
        )
    c = seq.data.shape[1]
    vol = reshape(transpose(seq, (1, 0)), (c, d, w, h))
    return transpose(vol, (0, 3, 2, 1))


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   D: Tensor, mode: str = "euler") -> Tensor:
    """Run the recurrence over ``u`` [L,d_inner] with per-step delta/B/C."""
    L, di = u.data.shape
    N = A.data.shape[1]
    if delta.data.shape != (L, di):
        raise ShapeError(f"selective_scan: delta {delta.data.shape} != u {u.data.shape}")
    if A.data.shape != (di, N) or D.data.shape != (di,):
        raise ShapeError(
            f"selective_scan: A {A.data.shape} / D {D.data.shape} inconsistent with d_inner={di}"
        )
    if B.data.shape != (L, N) or C.data.shape != (L, N):
        raise ShapeError(
            f"selective_scan: B {B.data.shape} / C {C.data.shape} must be [L,{N}]"
        )
    if mode not in _MODES:
        raise DataError(f"selective_scan: unknown discretization mode {mode!r}")
    if not np.all(delta.data >= 0):
        # softplus-produced steps may underflow to exactly 0; only negative
        # steps indicate a caller bug
        raise DataError("selective_scan: delta must be non-negative")
    imode = _MODES[mode]
    ud, dd, Ad, Bd, Cd, Dd = (t.data for t in (u, delta, A, B, C, D))
    y, h = _kern().scan_fwd(ud, dd, Ad, Bd, Cd, Dd, imode)

    def bwd(g):
        return _kern().scan_bwd(ud, dd, Ad, Bd, Cd, Dd, h, np.ascontiguousarray(g), imode)

    return record_op(y, (u, delta, A, B, C, D), bwd)


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal conv along tokens: y[t] = sum_j w[j] * x[t-j] + b."""
    L, c = x.data.shape
    k = w.data.shape[0]
    pad = Tensor(np.zeros((k - 1, c), dtype=x.data.dtype))
    xp = concat([pad, x], axis=0)
    out = None
    for j in range(k):
        term = mul(getitem(xp, (slice(k - 1 - j, k - 1 - j + L), slice(None))),
                   getitem(w, j))
        out = term if out is None else out + term
    return out + b


class SsmParams(Module):
    """Parameters of one Mamba mixer over token width ``d_model``."""

    def __init__(self, d_model: int, d_state: int = 16, d_conv: int = 4,
                 expand: int = 2, dt_rank: int | None = None,
                 dt_min: float = 1e-3, dt_max: float = 0.1,
                 mode: str = "euler", rng: np.random.Generator | None = None):
        if mode not in _MODES:
            raise DataError(f"SsmParams: unknown discretization mode {mode!r}")
        rng = rng or np.random.default_rng(0)
        di = expand * d_model
        self.d_model = d_model
        self.d_state = d_state
        self.d_conv = d_conv
        self.d_inner = di
        self.dt_rank = dt_rank if dt_rank is not None else max(1, math.ceil(d_model / 16))
        self.mode = mode

        def uni(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return param(rng.uniform(-bound, bound, shape))

        self.in_proj = uni(d_model, (d_model, 2 * di))
        self.conv_w = uni(d_conv, (d_conv, di))
        self.conv_b = uni(d_conv, (di,))
        self.dt_lowrank = uni(di, (di, self.dt_rank))
        dt_std = self.dt_rank**-0.5
        self.dt_proj = param(rng.uniform(-dt_std, dt_std, (self.dt_rank, di)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), di))
        dt = np.maximum(dt, 1e-4)
        self.dt_bias = param(dt + np.log(-np.expm1(-dt)))  # softplus^-1
        self.B_proj = uni(di, (di, d_state))
        self.C_proj = uni(di, (di, d_state))
        self.A_log = param(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (di, 1)))
        self.D = param(np.ones(di))
        self.out_proj = uni(di, (di, d_model))


def mamba_layer(seq: Tensor, p: SsmParams) -> Tensor:
    """Full mixer: in_proj -> (conv -> SiLU -> scan) ⊙ SiLU(z) -> out_proj."""
    if seq.data.ndim != 2 or seq.data.shape[1] != p.d_model:
        raise ShapeError(
            f"mamba_layer: sequence {seq.data.shape} does not match d_model={p.d_model}"
        )
    di = p.d_inner
    xz = matmul(seq, p.in_proj)
    x = getitem(xz, (slice(None), slice(0, di)))
    z = getitem(xz, (slice(None), slice(di, 2 * di)))
    x = silu(causal_conv1d(x, p.conv_w, p.conv_b))
    dt = softplus(matmul(matmul(x, p.dt_lowrank), p.dt_proj) + p.dt_bias)
    B = matmul(x, p.B_proj)
    C = matmul(x, p.C_proj)
    A = neg(texp(p.A_log))
    y = selective_scan(x, dt, A, B, C, p.D, p.mode)
    return matmul(mul(y, silu(z)), p.out_proj)


def scan_reference(u, delta, A, B, C, D, mode="euler"):
    """Literal per-step recurrence on numpy arrays (the scan oracle)."""
    u, delta, A, B, C, D = (np.asarray(v, dtype=np.float64) for v in (u, delta, A, B, C, D))
    L, di = u.shape
    N = A.shape[1]
    h = np.zeros((di, N))
    y = np.zeros((L, di))
    for t in range(L):
        abar = np.exp(delta[t][:, None] * A)
        if mode == "euler":
            bbar = delta[t][:, None] * B[t][None, :]
        else:
            bbar = np.expm1(delta[t][:, None] * A) / A * B[t][None, :]
        h = abar * h + bbar * u[t][:, None]
        y[t] = h @ C[t] + D * u[t]
    return y
