"""Finite-difference verification of every custom backward pass.

Each case builds a scalar loss (a fixed random weighting of the op output),
takes analytic gradients off the tape, then compares against central
differences: per-coordinate on a sample of coordinates for ops, plus a
directional probe (random unit direction across all leaves at once) for the
end-to-end network where per-coordinate probing is too slow.

Relative error is |a - n| / max(|a|, |n|, 1), so near-zero gradients are
judged on absolute error. Checks run at a generic point: parameters that
initialize to exact zeros/ones (gates, blend weights, zero-init tails) get
random noise added first, otherwise their branches would contribute nothing.
"""

from __future__ import annotations

import time

import numpy as np

from . import network
from .blocks import CsrmBlock, EflLayer
from .errors import ConfigError
from .ssm import SsmParams, mamba_layer
from .tensor import (Tensor, backward, conv3d, deconv3d, layer_norm, no_grad,
                     tsum)
from .train import dice_ce_loss


def _weighted_sum(out: Tensor, cache: dict, seed: int) -> Tensor:
    # the weighting must be identical across repeated loss evaluations
    if "w" not in cache:
        cache["w"] = Tensor(np.random.default_rng(seed).standard_normal(
            out.data.shape))
    return tsum(out * cache["w"])


def _warm(module, rng, scale=0.2):
    for p in module.params():
        # np.asarray: 0-d arithmetic yields scalars, which FD can't mutate
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.data.shape))


def check_case(build_loss, leaves, samples=16, eps=1e-5, seed=0):
    """Sampled central-difference check; returns (worst_rel_err, n_checked)."""
    rng = np.random.default_rng(seed)
    for p in leaves:
        p.grad = None
        p.data = np.array(p.data)  # writable ndarray, never a numpy scalar
    backward(build_loss())
    grads = []
    for p in leaves:
        if p.grad is None:
            raise ConfigError(f"leaf {p.name or '<unnamed>'} received no gradient")
        grads.append(np.array(p.grad))
        p.grad = None
    worst, checked = 0.0, 0
    with no_grad():
        for p, g in zip(leaves, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            n = flat.size
            idxs = rng.choice(n, size=min(samples, n), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                f1 = float(build_loss().data)
                flat[i] = orig - eps
                f2 = float(build_loss().data)
                flat[i] = orig
                num = (f1 - f2) / (2.0 * eps)
                worst = max(worst, abs(gflat[i] - num) /
                            max(abs(gflat[i]), abs(num), 1.0))
                checked += 1
    return worst, checked


def check_directional(build_loss, leaves, eps=1e-5, seed=0, probes=4):
    """Directional derivative vs sum of grad.dot(direction) over all leaves."""
    rng = np.random.default_rng(seed)
    for p in leaves:
        p.grad = None
        p.data = np.array(p.data)
    backward(build_loss())
    grads = [np.array(p.grad) for p in leaves]
    for p in leaves:
        p.grad = None
    worst = 0.0
    with no_grad():
        for _ in range(probes):
            dirs = [rng.standard_normal(p.data.shape) for p in leaves]
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            saved = [np.array(p.data) for p in leaves]
            for p, d in zip(leaves, dirs):
                p.data = np.asarray(p.data + eps * d)
            f1 = float(build_loss().data)
            for p, s, d in zip(leaves, saved, dirs):
                p.data = np.asarray(s - eps * d)
            f2 = float(build_loss().data)
            for p, s in zip(leaves, saved):
                p.data = s
            num = (f1 - f2) / (2.0 * eps)
            worst = max(worst, abs(analytic - num) /
                        max(abs(analytic), abs(num), 1.0))
    return worst, probes


def _case_conv(rng):
    x = Tensor(rng.standard_normal((2, 6, 6, 6)), requires_grad=True)
    w = Tensor(0.3 * rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    cache = {}
    return (lambda: _weighted_sum(conv3d(x, w, b, stride=2, padding=1), cache, 1),
            [x, w, b])


def _case_deconv(rng):
    x = Tensor(rng.standard_normal((3, 3, 3, 3)), requires_grad=True)
    w = Tensor(0.3 * rng.standard_normal((3, 2, 2, 2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    cache = {}
    return lambda: _weighted_sum(deconv3d(x, w, b, stride=2), cache, 2), [x, w, b]


def _case_layer_norm(rng):
    x = Tensor(rng.standard_normal((10, 6)), requires_grad=True)
    g = Tensor(1.0 + 0.2 * rng.standard_normal(6), requires_grad=True)
    b = Tensor(0.2 * rng.standard_normal(6), requires_grad=True)
    cache = {}
    return lambda: _weighted_sum(layer_norm(x, g, b), cache, 3), [x, g, b]


def _case_mamba(rng):
    p = SsmParams(8, rng=np.random.default_rng(11))
    seq = Tensor(rng.standard_normal((24, 8)), requires_grad=True)
    cache = {}
    return (lambda: _weighted_sum(mamba_layer(seq, p), cache, 4),
            [seq] + p.params())


def _case_csrm_block(rng):
    blk = CsrmBlock(4, 2, np.random.default_rng(12))
    _warm(blk, rng)
    x = Tensor(rng.standard_normal((4, 4, 4, 4)), requires_grad=True)
    cache = {}
    return lambda: _weighted_sum(blk(x), cache, 5), [x] + blk.params()


def _case_efl_layer(rng):
    layer = EflLayer(4, (4, 4, 4), 2, np.random.default_rng(13))
    _warm(layer, rng)
    x = Tensor(rng.standard_normal((4, 4, 4, 4)), requires_grad=True)
    cache = {}
    return lambda: _weighted_sum(layer(x), cache, 6), [x] + layer.params()


def _case_dice_ce(rng):
    logits = Tensor(rng.standard_normal((3, 4, 4, 4)), requires_grad=True)
    labels = np.random.default_rng(14).integers(0, 3, (4, 4, 4))
    return lambda: dice_ce_loss(logits, labels), [logits]


CASES = {
    "conv3d": _case_conv,
    "deconv3d": _case_deconv,
    "layer_norm": _case_layer_norm,
    "mamba_layer": _case_mamba,
    "csrm_block": _case_csrm_block,
    "efl_layer": _case_efl_layer,
    "dice_ce_loss": _case_dice_ce,
}


def check_network(seed=0, samples=12, probes=4):
    """End-to-end: a 16^3 two-class network against the compound loss.

    Directional probes across all parameters at once, plus sampled
    per-coordinate checks on a few randomly chosen parameter tensors.
    """
    rng = np.random.default_rng(seed)
    cfg = network.make_config("emnet", extents=(16, 16, 16), patch_size=2,
                              base_channels=4, classes=2)
    net = network.build(cfg, seed=21)
    _warm(net, rng, scale=0.05)
    image = Tensor(rng.standard_normal((1, 16, 16, 16)), requires_grad=True)
    labels = np.random.default_rng(15).integers(0, 2, (16, 16, 16))

    def build_loss():
        return dice_ce_loss(net(image), labels)

    leaves = [image] + net.params()
    worst_dir, _ = check_directional(build_loss, leaves, seed=seed, probes=probes)
    picked = list(np.random.default_rng(seed + 1).choice(
        len(leaves), size=min(6, len(leaves)), replace=False))
    worst_pt = 0.0
    for li in picked:
        w, _ = check_case(build_loss, [leaves[li]], samples=min(samples, 3),
                          seed=seed + 2 + int(li))
        worst_pt = max(worst_pt, w)
    return max(worst_dir, worst_pt)


def run_suite(seed=0, samples=16, names=None):
    """Run gradient cases (all by default, or the named subset); returns rows
    of {name, worst, checked, seconds}."""
    rows = []
    for name, factory in CASES.items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        build_loss, leaves = factory(np.random.default_rng(seed))
        worst, checked = check_case(build_loss, leaves, samples=samples,
                                    seed=seed)
        rows.append({"name": name, "worst": worst, "checked": checked,
                     "seconds": time.perf_counter() - t0})
    if names is None or "network" in names:
        t0 = time.perf_counter()
        worst = check_network(seed=seed)
        rows.append({"name": "network_16cubed", "worst": worst, "checked": -1,
                     "seconds": time.perf_counter() - t0})
    return rows
