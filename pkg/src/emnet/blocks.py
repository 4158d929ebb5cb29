"""Network building blocks.

Two mixer blocks share the encoder/decoder skeleton:

* CSRM — squeeze/reinforce selective-scan block. A single shared Mamba mixer is
  applied to both a channel-squeezed view (pointwise Down then Up, ratio r) and
  the raw tokens; the two responses are blended back through a learnable scalar
  omega that starts at zero:  M = F + omega * (M_s + M_e). The block then adds a
  zero-initialized conv over a residual conv stack: M_out = M + Conv(Resblock(M)).
  Freshly built blocks are therefore exact identity maps.

* CSRM-F — frequency-domain block. Tokens are layer-normalized, sent through
  fft3, multiplied by a learnable per-frequency real gate (init: ones), brought
  back by ifft3, and mixed by a channel MLP (GELU, ratio 2) whose up-projection
  starts at zero:  S_out = S_I + Up(Down(m')). Identity at init as well. The
  gate's shape is fixed to the block's build-time resolution; feeding a volume
  of any other extent is an error (it signals a window/config mismatch).
  An optional ``tail`` flag appends the same Resblock+Conv pair the CSRM block
  uses (off by default; the frequency block is a pure spectral residual).

The Resblock is conv3x3x3 -> instance norm -> leaky ReLU, twice, with an
identity shortcut.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .fft import fft3, ifft3, spectral_gate
from .ssm import SsmParams, flatten_tokens, mamba_layer, unflatten_tokens
from .tensor import (
    Module,
    Tensor,
    add,
    conv3d,
    deconv3d,
    gelu,
    instance_norm,
    layer_norm,
    leaky_relu,
    linear,
    mul,
    param,
)

LEAKY_SLOPE = 0.01


class Conv3d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, zero_init=False):
        self.stride = stride
        self.pad = pad
        if zero_init:
            self.w = param(np.zeros((cout, cin, k, k, k)))
            self.b = param(np.zeros(cout))
        else:
            # variance-preserving uniform: std 1/sqrt(fan_in)
            bound = math.sqrt(3.0 / (cin * k**3))
            self.w = param(rng.uniform(-bound, bound, (cout, cin, k, k, k)))
            self.b = param(rng.uniform(-bound, bound, cout))

    def __call__(self, x):
        return conv3d(x, self.w, self.b, self.stride, self.pad)


class Deconv3d(Module):
    """Transposed conv with kernel == stride: exact x`stride` upsampling."""

    def __init__(self, cin, cout, stride, rng):
        self.stride = stride
        # kernel == stride: every output voxel sees exactly cin inputs
        bound = math.sqrt(3.0 / cin)
        self.w = param(rng.uniform(-bound, bound, (cin, cout, stride, stride, stride)))
        self.b = param(rng.uniform(-bound, bound, cout))

    def __call__(self, x):
        return deconv3d(x, self.w, self.b, self.stride)


class Resblock(Module):
    def __init__(self, channels, rng):
        self.conv1 = Conv3d(channels, channels, 3, pad=1, rng=rng)
        self.in1_g = param(np.ones(channels))
        self.in1_b = param(np.zeros(channels))
        self.conv2 = Conv3d(channels, channels, 3, pad=1, rng=rng)
        self.in2_g = param(np.ones(channels))
        self.in2_b = param(np.zeros(channels))

    def __call__(self, x):
        y = leaky_relu(instance_norm(self.conv1(x), self.in1_g, self.in1_b), LEAKY_SLOPE)
        y = leaky_relu(instance_norm(self.conv2(y), self.in2_g, self.in2_b), LEAKY_SLOPE)
        return add(x, y)


class CsrmLayer(Module):
    """M = F + omega * (Mamba(Up(Down(F))) + Mamba(F)), one shared Mamba."""

    def __init__(self, channels, squeeze_ratio=2, rng=None, **ssm_kwargs):
        if channels % squeeze_ratio:
            raise ConfigError(
                f"csrm_layer: channels {channels} not divisible by squeeze ratio {squeeze_ratio}"
            )
        mid = channels // squeeze_ratio
        bound = 1.0 / math.sqrt(channels)
        self.channels = channels
        self.down_w = param(rng.uniform(-bound, bound, (channels, mid)))
        self.down_b = param(rng.uniform(-bound, bound, mid))
        bound2 = 1.0 / math.sqrt(mid)
        self.up_w = param(rng.uniform(-bound2, bound2, (mid, channels)))
        self.up_b = param(rng.uniform(-bound2, bound2, channels))
        self.mamba = SsmParams(channels, rng=rng, **ssm_kwargs)
        self.omega = param(np.zeros(()))

    def __call__(self, vol: Tensor) -> Tensor:
        if vol.data.shape[0] != self.channels:
            raise ShapeError(
                f"csrm_layer: volume channels {vol.data.shape[0]} != layer width {self.channels}"
            )
        extents = vol.data.shape[1:]
        seq = flatten_tokens(vol)
        squeezed = linear(linear(seq, self.down_w, self.down_b), self.up_w, self.up_b)
        m_s = mamba_layer(squeezed, self.mamba)
        m_e = mamba_layer(seq, self.mamba)
        out = add(seq, mul(self.omega, add(m_s, m_e)))
        return unflatten_tokens(out, extents)


class CsrmBlock(Module):
    def __init__(self, channels, squeeze_ratio=2, rng=None, **ssm_kwargs):
        self.layer = CsrmLayer(channels, squeeze_ratio, rng, **ssm_kwargs)
        self.res = Resblock(channels, rng)
        self.tail_conv = Conv3d(channels, channels, 1, zero_init=True)

    def __call__(self, vol: Tensor) -> Tensor:
        m = self.layer(vol)
        return add(m, self.tail_conv(self.res(m)))


class EflLayer(Module):
    """S_out = S_I + Up(GELU(Down(ifft3(gate * fft3(LN(S_I))))))."""

    def __init__(self, channels, resolution, mlp_ratio=2, rng=None):
        h, w, d = resolution
        for ax, n in enumerate(resolution):
            if n < 1 or (n & (n - 1)) != 0:
                raise ConfigError(
                    f"efl_layer: resolution extent {n} on axis {ax} is not a power of two"
                )
        if channels % mlp_ratio:
            raise ConfigError(
                f"efl_layer: channels {channels} not divisible by mlp ratio {mlp_ratio}"
            )
        mid = channels // mlp_ratio
        self.channels = channels
        self.resolution = (h, w, d)
        self.ln_g = param(np.ones(channels))
        self.ln_b = param(np.zeros(channels))
        self.gate = param(np.ones((channels, h, w, d)))
        bound = 1.0 / math.sqrt(channels)
        self.mlp_down_w = param(rng.uniform(-bound, bound, (channels, mid)))
        self.mlp_down_b = param(rng.uniform(-bound, bound, mid))
        self.mlp_up_w = param(np.zeros((mid, channels)))
        self.mlp_up_b = param(np.zeros(channels))

    def __call__(self, vol: Tensor) -> Tensor:
        if vol.data.shape != self.gate.data.shape:
            raise ShapeError(
                f"efl_layer: volume shape {vol.data.shape} does not match the "
                f"registered gate shape {self.gate.data.shape} (window/config mismatch?)"
            )
        extents = vol.data.shape[1:]
        seq = flatten_tokens(vol)
        normed = unflatten_tokens(layer_norm(seq, self.ln_g, self.ln_b), extents)
        spec = spectral_gate(fft3(normed), self.gate)
        filtered = ifft3(spec)
        tok = flatten_tokens(filtered)
        tok = linear(gelu(linear(tok, self.mlp_down_w, self.mlp_down_b)),
                     self.mlp_up_w, self.mlp_up_b)
        return add(vol, unflatten_tokens(tok, extents))


class CsrmfBlock(Module):
    def __init__(self, channels, resolution, mlp_ratio=2, rng=None, tail=False):
        self.efl = EflLayer(channels, resolution, mlp_ratio, rng)
        self.res = Resblock(channels, rng) if tail else None
        self.tail_conv = Conv3d(channels, channels, 1, zero_init=True) if tail else None

    def __call__(self, vol: Tensor) -> Tensor:
        out = self.efl(vol)
        if self.res is not None:
            out = add(out, self.tail_conv(self.res(out)))
        return out
