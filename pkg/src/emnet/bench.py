"""Micro-benchmarks over both kernel backends, plus scaling-law fits.

Timings are min-of-repeats after a warmup run, which is the stable estimator
for short kernels on a shared machine. ``fit_slope`` turns a size/seconds
table into a log-log least-squares slope so scaling claims (linear scan,
n log n transform) can be checked numerically.
"""

from __future__ import annotations

import csv
import math
import time

import numpy as np

from . import kernels
from .errors import ConfigError
from .ssm import SsmParams, mamba_layer
from .tensor import Tensor, no_grad


def time_call(fn, repeats: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def fit_slope(sizes, seconds) -> float:
    """Least-squares slope of log(seconds) against log(sizes)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(seconds, dtype=np.float64))
    x = x - x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def bench_scan(lengths=(1024, 2048, 4096, 8192), d_inner=64, d_state=16,
               backends=None, repeats=5, seed=0):
    """Raw selective-scan kernel times; rows (op, backend, size, seconds, bytes)."""
    rng = np.random.default_rng(seed)
    rows = []
    for backend in backends or kernels.AVAILABLE:
        for L in lengths:
            u = rng.standard_normal((L, d_inner))
            dt = rng.uniform(0.001, 0.1, (L, d_inner))
            A = -np.exp(rng.standard_normal((d_inner, d_state)))
            B = rng.standard_normal((L, d_state))
            C = rng.standard_normal((L, d_state))
            D = rng.standard_normal(d_inner)
            nbytes = sum(a.nbytes for a in (u, dt, A, B, C, D))
            with kernels.use_backend(backend):
                k = kernels.active()
                sec = time_call(lambda: k.scan_fwd(u, dt, A, B, C, D, 0),
                                repeats=repeats)
            rows.append(("scan", backend, L, sec, nbytes))
    return rows


def bench_mamba(lengths=(1024, 2048, 4096, 8192), d_model=64, repeats=3,
                backends=None, seed=0):
    """Full token-mixer forward (projections + conv + scan) per length."""
    rng = np.random.default_rng(seed)
    p = SsmParams(d_model, rng=np.random.default_rng(seed + 1))
    rows = []
    for backend in backends or kernels.AVAILABLE:
        for L in lengths:
            seq = Tensor(rng.standard_normal((L, d_model)))
            with kernels.use_backend(backend), no_grad():
                sec = time_call(lambda: mamba_layer(seq, p), repeats=repeats)
            rows.append(("mamba", backend, L, sec, seq.data.nbytes))
    return rows


def bench_fft3(extents=(8, 16, 32, 64), channels=8, repeats=5, backends=None,
               seed=0):
    """fft3 on cubes; size column is the voxel count n = e^3."""
    from .fft import fft3

    rng = np.random.default_rng(seed)
    rows = []
    for backend in backends or kernels.AVAILABLE:
        for e in extents:
            x = Tensor(rng.standard_normal((channels, e, e, e)))
            with kernels.use_backend(backend), no_grad():
                sec = time_call(lambda: fft3(x), repeats=repeats)
            rows.append(("fft3", backend, e**3, sec, x.data.nbytes))
    return rows


def bench_conv3d(extents=(8, 16, 24, 32), cin=8, cout=8, k=3, repeats=3,
                 backends=None, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for backend in backends or kernels.AVAILABLE:
        for e in extents:
            x = rng.standard_normal((cin, e, e, e))
            w = rng.standard_normal((cout, cin, k, k, k))
            b = rng.standard_normal(cout)
            nbytes = x.nbytes + w.nbytes + b.nbytes
            with kernels.use_backend(backend):
                kmod = kernels.active()
                sec = time_call(lambda: kmod.conv3d_fwd(x, w, b, 1, 1),
                                repeats=repeats)
            rows.append(("conv3d", backend, e**3, sec, nbytes))
    return rows


_OPS = {
    "scan": bench_scan,
    "mamba": bench_mamba,
    "fft3": bench_fft3,
    "conv3d": bench_conv3d,
}


def run(ops=None, backends=None, out_csv=None):
    """Run the selected benchmarks; returns (and optionally writes) rows."""
    rows = []
    for op in ops or sorted(_OPS):
        if op not in _OPS:
            raise ConfigError(f"unknown bench op {op!r} (have {', '.join(sorted(_OPS))})")
        rows.extend(_OPS[op](backends=backends))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["op", "backend", "size", "seconds", "bytes"])
            for row in rows:
                w.writerow([row[0], row[1], row[2], repr(row[3]), row[4]])
    return rows


def scan_length_slope(backend=None, repeats=5) -> float:
    """Wall-time scaling exponent of the scan against sequence length."""
    backend = backend or kernels.BACKEND
    rows = bench_scan(backends=[backend], repeats=repeats)
    return fit_slope([r[2] for r in rows], [r[3] for r in rows])


def mamba_length_slope(backend=None, repeats=3) -> float:
    backend = backend or kernels.BACKEND
    rows = bench_mamba(backends=[backend], repeats=repeats)
    return fit_slope([r[2] for r in rows], [r[3] for r in rows])


def fft3_model_slope(backend=None, repeats=5) -> float:
    """Slope of fft3 time against the n*log2(n) work model (1.0 = ideal)."""
    backend = backend or kernels.BACKEND
    rows = bench_fft3(backends=[backend], repeats=repeats)
    model = [r[2] * math.log2(r[2]) for r in rows]
    return fit_slope(model, [r[3] for r in rows])
