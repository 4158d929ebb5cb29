"""Pure-numpy kernel backend.

Same call surface as the compiled core (`_core`). Convolutions go through
im2col + BLAS matmul; the selective scan is a per-step numpy loop; FFT
butterflies are vectorized over rows and blocks. All functions return freshly
allocated arrays in the dtype of their inputs.
"""

import numpy as np

NAME = "pure"


# --------------------------------------------------------------------------- #
# conv3d: x [Ci,H,W,D], w [Co,Ci,k,k,k], cross-correlation
# --------------------------------------------------------------------------- #


def _im2col(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    ci = x.shape[0]
    ho, wo, do = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(
        ci * k * k * k, ho * wo * do
    )
    return cols, (ho, wo, do)


def conv3d_fwd(x, w, b, stride, pad):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    cols, (ho, wo, do) = _im2col(x, k, stride, pad)
    y = w.reshape(co, ci * k * k * k) @ cols + b[:, None]
    return np.ascontiguousarray(y.reshape(co, ho, wo, do))


def conv3d_bwd(x, w, gy, stride, pad):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    ho, wo, do = gy.shape[1:]
    cols, _ = _im2col(x, k, stride, pad)
    gy2 = gy.reshape(co, -1)
    gb = gy.sum(axis=(1, 2, 3))
    gw = (gy2 @ cols.T).reshape(w.shape)
    gcols = (w.reshape(co, -1).T @ gy2).reshape(ci, k, k, k, ho, wo, do)
    padded = tuple(n + 2 * pad for n in x.shape[1:])
    gxp = np.zeros((ci,) + padded, dtype=x.dtype)
    for kh in range(k):
        for kw in range(k):
            for kd in range(k):
                gxp[
                    :,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                    kd : kd + stride * do : stride,
                ] += gcols[:, kh, kw, kd]
    gx = gxp[:, pad : pad + x.shape[1], pad : pad + x.shape[2], pad : pad + x.shape[3]]
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------- #
# deconv3d (transposed conv): x [Ci,H,W,D], w [Ci,Co,k,k,k], out (n-1)*s + k
# --------------------------------------------------------------------------- #


def deconv3d_fwd(x, w, b, stride):
    ci, co, k = w.shape[0], w.shape[1], w.shape[2]
    h, ww, d = x.shape[1:]
    oh, ow, od = ((n - 1) * stride + k for n in (h, ww, d))
    t = np.tensordot(w, x, axes=([0], [0]))  # [Co,k,k,k,H,W,D]
    y = np.zeros((co, oh, ow, od), dtype=x.dtype)
    for kh in range(k):
        for kw in range(k):
            for kd in range(k):
                y[
                    :,
                    kh : kh + stride * h : stride,
                    kw : kw + stride * ww : stride,
                    kd : kd + stride * d : stride,
                ] += t[:, kh, kw, kd]
    return y + b[:, None, None, None]


def deconv3d_bwd(x, w, gy, stride):
    ci, co, k = w.shape[0], w.shape[1], w.shape[2]
    h, ww, d = x.shape[1:]
    gb = gy.sum(axis=(1, 2, 3))
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for kh in range(k):
        for kw in range(k):
            for kd in range(k):
                view = gy[
                    :,
                    kh : kh + stride * h : stride,
                    kw : kw + stride * ww : stride,
                    kd : kd + stride * d : stride,
                ]
                gx += np.tensordot(w[:, :, kh, kw, kd], view, axes=([1], [0]))
                gw[:, :, kh, kw, kd] = np.tensordot(x, view, axes=([1, 2, 3], [1, 2, 3]))
    return gx, gw, gb


# --------------------------------------------------------------------------- #
# selective scan: h_t = exp(dt*A) h_{t-1} + coef * u_t,  y_t = C_t·h_t + D u_t
# mode 0: coef = dt * B_t (Euler);  mode 1: coef = expm1(dt*A)/A * B_t (ZOH)
# --------------------------------------------------------------------------- #


def scan_fwd(u, dt, A, B, C, D, mode):
    L, di = u.shape
    N = A.shape[1]
    h = np.empty((L, di, N), dtype=u.dtype)
    y = np.empty((L, di), dtype=u.dtype)
    hprev = np.zeros((di, N), dtype=u.dtype)
    for t in range(L):
        da = dt[t][:, None] * A
        a = np.exp(da)
        if mode == 0:
            coef = dt[t][:, None] * B[t][None, :]
        else:
            coef = np.expm1(da) / A * B[t][None, :]
        hprev = a * hprev + coef * u[t][:, None]
        h[t] = hprev
        y[t] = hprev @ C[t] + D * u[t]
    return y, h


def scan_bwd(u, dt, A, B, C, D, h, gy, mode):
    L, di = u.shape
    gu = np.zeros_like(u)
    gdt = np.zeros_like(dt)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    gh = np.zeros_like(gA)  # carry [di,N]
    for t in range(L - 1, -1, -1):
        gyt = gy[t]
        gu[t] += D * gyt
        gD += gyt * u[t]
        gC[t] = h[t].T @ gyt
        ght = gh + C[t][None, :] * gyt[:, None]
        hprev = h[t - 1] if t > 0 else np.zeros_like(gA)
        da = dt[t][:, None] * A
        a = np.exp(da)
        ga = ght * hprev
        gdt[t] += (ga * A * a).sum(axis=1)
        gA += ga * dt[t][:, None] * a
        gcoef = ght * u[t][:, None]
        if mode == 0:
            gB[t] += (gcoef * dt[t][:, None]).sum(axis=0)
            gdt[t] += gcoef @ B[t]
            gu[t] += (ght * (dt[t][:, None] * B[t][None, :])).sum(axis=1)
        else:
            kmat = np.expm1(da) / A
            gB[t] += (gcoef * kmat).sum(axis=0)
            gdt[t] += ((gcoef * B[t][None, :]) * a).sum(axis=1)
            gA += gcoef * B[t][None, :] * (dt[t][:, None] * a - kmat) / A
            gu[t] += (ght * (kmat * B[t][None, :])).sum(axis=1)
        gh = ght * a
    return gu, gdt, gA, gB, gC, gD


# --------------------------------------------------------------------------- #
# radix-2 FFT along the trailing axis of a [rows, n] pair of real buffers
# --------------------------------------------------------------------------- #


def fft1d_batch(re, im, perm, cos, sin, inverse):
    """In-place decimation-in-time radix-2 transform; unnormalized."""
    rows, n = re.shape
    if n == 1:
        return
    re[:] = re[:, perm]
    im[:] = im[:, perm]
    sign = -1.0 if inverse else 1.0
    half = 1
    while half < n:
        m = half * 2
        step = n // m
        c = cos[0 : half * step : step]
        s = sin[0 : half * step : step]
        ar = re.reshape(rows, n // m, m)
        ai = im.reshape(rows, n // m, m)
        ur = ar[:, :, :half].copy()
        ui = ai[:, :, :half].copy()
        vr = ar[:, :, half:]
        vi = ai[:, :, half:]
        # twiddle w = cos ∓ i sin (forward uses -i, inverse +i)
        tr = vr * c + sign * vi * s
        ti = vi * c - sign * vr * s
        ar[:, :, :half] = ur + tr
        ai[:, :, :half] = ui + ti
        ar[:, :, half:] = ur - tr
        ai[:, :, half:] = ui - ti
        half = m
