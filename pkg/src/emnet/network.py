"""Four-stage encoder/decoder segmentation network.

Layout for input extents E and patch size P (stage-1 resolution R = E/P):

* STEM: conv k=P s=P, in_channels -> C0, output [C0, R]
* encoder stages i = 1..4 at resolutions R/2^(i-1), channels C0*2^(i-1);
  a strided 2x2x2 conv doubles channels between stages
* decoder stages 4..2: deconv x2 halving channels, concat of the matching
  encoder skip (the one at the deconv's output resolution), 1x1x1 fusion conv
  back to stage width, then a CSRM block (the deepest three decoder stages)
* decoder stage 1: a plain conv block (Resblock) at [C0, R]
* final deconv xP back to the input resolution, then a 1x1x1 conv to K logits

Presets select the encoder stage mixers; the decoder is fixed:

    emnet      CSRM, CSRM, CSRM-F, CSRM-F
    variant-a  CSRM x4
    variant-b  CSRM-F, CSRM-F, CSRM, CSRM
    variant-c  CSRM-F x4

Config invariants (checked by ``validate``): extents divisible by P*8 so every
stage resolution is integral; stage resolutions must be powers of two wherever
a CSRM-F block sits (its FFT and gate demand it); channel width divisible by
the squeeze/MLP ratios; K >= 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import Conv3d, CsrmBlock, CsrmfBlock, Deconv3d, Resblock
from .errors import ConfigError, ShapeError
from .tensor import Module, Tensor, concat

PRESETS = {
    "emnet": ("csrm", "csrm", "csrmf", "csrmf"),
    "variant-a": ("csrm", "csrm", "csrm", "csrm"),
    "variant-b": ("csrmf", "csrmf", "csrm", "csrm"),
    "variant-c": ("csrmf", "csrmf", "csrmf", "csrmf"),
}


@dataclass
class NetworkConfig:
    extents: tuple = (32, 32, 32)
    patch_size: int = 4
    base_channels: int = 8
    classes: int = 5
    stage_blocks: tuple = PRESETS["emnet"]
    squeeze_ratio: int = 2
    mlp_ratio: int = 2
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    dt_rank: int | None = None
    scan_mode: str = "euler"
    csrmf_tail: bool = False
    in_channels: int = 1

    def to_dict(self):
        return {
            "extents": list(self.extents),
            "patch_size": self.patch_size,
            "base_channels": self.base_channels,
            "classes": self.classes,
            "stage_blocks": list(self.stage_blocks),
            "squeeze_ratio": self.squeeze_ratio,
            "mlp_ratio": self.mlp_ratio,
            "d_state": self.d_state,
            "d_conv": self.d_conv,
            "expand": self.expand,
            "dt_rank": self.dt_rank,
            "scan_mode": self.scan_mode,
            "csrmf_tail": self.csrmf_tail,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "extents" in d:
            d["extents"] = tuple(d["extents"])
        if "stage_blocks" in d:
            d["stage_blocks"] = tuple(d["stage_blocks"])
        return cls(**d)


def make_config(preset: str = "emnet", **overrides) -> NetworkConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (have {', '.join(sorted(PRESETS))})")
    cfg = NetworkConfig(stage_blocks=PRESETS[preset])
    cfg = replace(cfg, **overrides)
    validate(cfg)
    return cfg


def desk_config(preset: str = "emnet", **overrides) -> NetworkConfig:
    """32^3 input, P=4, C0=8: the configuration everything trains at here."""
    return make_config(preset, **overrides)


def full_config(preset: str = "emnet", **overrides) -> NetworkConfig:
    """Full-scale 128^3-input configuration with C0 sized so the variant
    parameter-count ordering (A > B > emnet > C) holds; tens of millions."""
    overrides.setdefault("extents", (128, 128, 128))
    overrides.setdefault("base_channels", 136)
    overrides.setdefault("classes", 9)
    return make_config(preset, **overrides)


def stage_channels(cfg: NetworkConfig):
    return [cfg.base_channels * 2**i for i in range(4)]


def stage_resolutions(cfg: NetworkConfig):
    res = []
    for i in range(4):
        div = cfg.patch_size * 2**i
        res.append(tuple(e // div for e in cfg.extents))
    return res


def validate(cfg: NetworkConfig) -> None:
    if len(cfg.extents) != 3 or any(e < 1 for e in cfg.extents):
        raise ConfigError(f"extents must be three positive integers, got {cfg.extents}")
    if cfg.patch_size < 1:
        raise ConfigError(f"patch_size must be >= 1, got {cfg.patch_size}")
    unit = cfg.patch_size * 8
    for ax, e in enumerate(cfg.extents):
        if e % unit:
            raise ConfigError(
                f"input extent {e} on axis {ax} is not divisible by patch_size*8 = {unit}"
            )
    if cfg.classes < 2:
        raise ConfigError(f"classes must be >= 2, got {cfg.classes}")
    if len(cfg.stage_blocks) != 4:
        raise ConfigError(f"stage_blocks must list 4 stages, got {cfg.stage_blocks}")
    for kind in cfg.stage_blocks:
        if kind not in ("csrm", "csrmf"):
            raise ConfigError(f"unknown stage block kind {kind!r} (expected csrm|csrmf)")
    if cfg.base_channels < 2 or cfg.base_channels % cfg.squeeze_ratio or \
            cfg.base_channels % cfg.mlp_ratio:
        raise ConfigError(
            f"base_channels {cfg.base_channels} must be >= 2 and divisible by the "
            f"squeeze ratio {cfg.squeeze_ratio} and mlp ratio {cfg.mlp_ratio}"
        )
    if cfg.scan_mode not in ("euler", "zoh"):
        raise ConfigError(f"scan_mode must be euler|zoh, got {cfg.scan_mode!r}")
    res = stage_resolutions(cfg)
    for i, kind in enumerate(cfg.stage_blocks):
        if kind != "csrmf":
            continue
        for ax, n in enumerate(res[i]):
            if n < 1 or (n & (n - 1)) != 0:
                raise ConfigError(
                    f"stage {i + 1} resolution extent {n} on axis {ax} is not a power "
                    f"of two, required by its csrmf block"
                )


class Network(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        validate(cfg)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = stage_channels(cfg)
        res = stage_resolutions(cfg)
        ssm_kwargs = dict(
            d_state=cfg.d_state, d_conv=cfg.d_conv, expand=cfg.expand,
            dt_rank=cfg.dt_rank, mode=cfg.scan_mode,
        )

        def make_block(kind, c, r):
            if kind == "csrm":
                return CsrmBlock(c, cfg.squeeze_ratio, rng, **ssm_kwargs)
            return CsrmfBlock(c, r, cfg.mlp_ratio, rng, tail=cfg.csrmf_tail)

        self.stem = Conv3d(cfg.in_channels, ch[0], cfg.patch_size,
                           stride=cfg.patch_size, rng=rng)
        self.enc_blocks = [make_block(cfg.stage_blocks[i], ch[i], res[i]) for i in range(4)]
        self.downs = [Conv3d(ch[i], ch[i + 1], 2, stride=2, rng=rng) for i in range(3)]
        # decoder stages 4..2 (CSRM), then the stage-1 conv block
        self.deconvs = [Deconv3d(ch[i + 1], ch[i], 2, rng) for i in (2, 1, 0)]
        self.fuses = [Conv3d(2 * ch[i], ch[i], 1, rng=rng) for i in (2, 1, 0)]
        self.dec_blocks = [CsrmBlock(ch[i], cfg.squeeze_ratio, rng, **ssm_kwargs)
                           for i in (2, 1, 0)]
        self.dec_first = Resblock(ch[0], rng)
        self.final_deconv = Deconv3d(ch[0], ch[0], cfg.patch_size, rng)
        self.head = Conv3d(ch[0], cfg.classes, 1, rng=rng)

    def __call__(self, x: Tensor, skeleton: bool = False) -> Tensor:
        """Forward to K logits. ``skeleton=True`` bypasses every mixer block
        (diagnostic: a fresh network equals its skeleton exactly)."""
        shape = (self.cfg.in_channels,) + tuple(self.cfg.extents)
        if x.data.shape != shape:
            raise ShapeError(
                f"network input shape {x.data.shape} does not match config {shape}"
            )
        f = self.stem(x)
        skips = []
        for i in range(4):
            if not skeleton:
                f = self.enc_blocks[i](f)
            skips.append(f)
            if i < 3:
                f = self.downs[i](f)
        d = f
        for j, enc_i in enumerate((2, 1, 0)):
            d = self.deconvs[j](d)
            d = self.fuses[j](concat([d, skips[enc_i]], axis=0))
            if not skeleton:
                d = self.dec_blocks[j](d)
        d = self.dec_first(d)
        d = self.final_deconv(d)
        return self.head(d)


def build(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)


def count_params(net: Network) -> int:
    """Exact trainable-scalar count (registry walk over every parameter)."""
    return net.num_params()


# --------------------------------------------------------------------------- #
# FLOP accounting. Multiply-add counts as 2 ops; documented per-op formulas:
#   conv3d      2*Cout*Vout*Cin*k^3 + Cout*Vout          (bias add)
#   deconv3d    2*Cin*Cout*k^3*Vin + Cout*Vout
#   matmul/lin  2*L*Cin*Cout (+ L*Cout bias)
#   layer/inst norm   8 * numel
#   activations silu/gelu 4*numel, softplus 4*numel, leaky 1*numel
#   scan        L*d_inner*N*9 + 2*L*d_inner   (exp, blend, readout, skip)
#   fft3/ifft3  C * 5*n*log2(n), n = H*W*D    (radix-2 real-op count)
#   gate        2*C*n (complex * real)
#   add/mul     numel
# --------------------------------------------------------------------------- #


def _flops_conv(cin, cout, k, vout):
    return 2 * cout * vout * cin * k**3 + cout * vout


def _flops_deconv(cin, cout, k, vin, vout):
    return 2 * cin * cout * k**3 * vin + cout * vout


def _flops_linear(l, cin, cout, bias=True):
    return 2 * l * cin * cout + (l * cout if bias else 0)


def _flops_mamba(c, l, cfg):
    di = cfg.expand * c
    n = cfg.d_state
    rank = cfg.dt_rank if cfg.dt_rank is not None else max(1, math.ceil(c / 16))
    total = _flops_linear(l, c, 2 * di, bias=False)
    total += 2 * l * di * cfg.d_conv + l * di  # causal conv + bias
    total += 4 * l * di  # silu
    total += _flops_linear(l, di, rank, bias=False) + _flops_linear(l, rank, di)
    total += 4 * l * di  # softplus
    total += 2 * _flops_linear(l, di, n, bias=False)  # B, C projections
    total += 2 * di * n  # A = -exp(A_log)
    total += 9 * l * di * n + 2 * l * di  # scan
    total += 5 * l * di  # y * silu(z)
    total += _flops_linear(l, di, c, bias=False)
    return total


def _flops_resblock(c, vox):
    conv = _flops_conv(c, c, 3, vox)
    return 2 * conv + 2 * 8 * c * vox + 2 * c * vox + c * vox


def _flops_csrm_block(c, vox, cfg):
    mid = c // cfg.squeeze_ratio
    total = _flops_linear(vox, c, mid) + _flops_linear(vox, mid, c)  # squeeze
    total += 2 * _flops_mamba(c, vox, cfg)
    total += 3 * c * vox  # omega blend + residual
    total += _flops_resblock(c, vox) + _flops_conv(c, c, 1, vox) + c * vox
    return total


def _flops_csrmf_block(c, resolution, cfg):
    n = int(np.prod(resolution))
    total = 8 * c * n  # layer norm
    total += 2 * int(c * 5 * n * max(math.log2(n), 0))  # fft3 + ifft3
    total += 2 * c * n  # gate
    mid = c // cfg.mlp_ratio
    total += _flops_linear(n, c, mid) + 4 * n * mid + _flops_linear(n, mid, c)
    total += c * n  # residual
    if cfg.csrmf_tail:
        total += _flops_resblock(c, n) + _flops_conv(c, c, 1, n) + c * n
    return total


def count_flops(net, extents=None) -> int:
    """Forward-pass FLOPs for a network (or bare config) at the given input
    extents (defaults to the config's own); formulas in the table above."""
    cfg = net.cfg if hasattr(net, "cfg") else net
    if extents is not None:
        cfg = NetworkConfig.from_dict({**cfg.to_dict(), "extents": tuple(extents)})
    validate(cfg)
    ch = stage_channels(cfg)
    res = stage_resolutions(cfg)
    vox = [int(np.prod(r)) for r in res]
    full = int(np.prod(cfg.extents))
    total = _flops_conv(cfg.in_channels, ch[0], cfg.patch_size, vox[0])
    for i in range(4):
        if cfg.stage_blocks[i] == "csrm":
            total += _flops_csrm_block(ch[i], vox[i], cfg)
        else:
            total += _flops_csrmf_block(ch[i], res[i], cfg)
        if i < 3:
            total += _flops_conv(ch[i], ch[i + 1], 2, vox[i + 1])
    for i in (2, 1, 0):
        total += _flops_deconv(ch[i + 1], ch[i], 2, vox[i + 1], vox[i])
        total += _flops_conv(2 * ch[i], ch[i], 1, vox[i])
        total += _flops_csrm_block(ch[i], vox[i], cfg)
    total += _flops_resblock(ch[0], vox[0])
    total += _flops_deconv(ch[0], ch[0], cfg.patch_size, vox[0], full)
    total += _flops_conv(ch[0], cfg.classes, 1, full)
    return total
