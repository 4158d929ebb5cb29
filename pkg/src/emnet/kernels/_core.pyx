# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: direct-loop conv3d/deconv3d, fused selective scan,
and radix-2 FFT butterflies. Mirrors the call surface of ``pure``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1

NAME = "native"

ctypedef fused floating:
    float
    double


def _dtype(floating v):
    if floating is float:
        return np.float32
    return np.float64


# --------------------------------------------------------------------------- #
# conv3d
# --------------------------------------------------------------------------- #


def conv3d_fwd(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
               floating[::1] b, int stride, int pad):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = x.shape[1], ww = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (ww + 2 * pad - k) // stride + 1
    cdef Py_ssize_t do = (d + 2 * pad - k) // stride + 1
    y_arr = np.empty((co, ho, wo, do), dtype=_dtype(x[0, 0, 0, 0]))
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t o, c, oh, ow, od, kh, kw, kd, ih, iw, id_
    cdef floating acc
    for o in range(co):
        for oh in range(ho):
            for ow in range(wo):
                for od in range(do):
                    acc = b[o]
                    for c in range(ci):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if iw < 0 or iw >= ww:
                                    continue
                                for kd in range(k):
                                    id_ = od * stride + kd - pad
                                    if id_ < 0 or id_ >= d:
                                        continue
                                    acc = acc + w[o, c, kh, kw, kd] * x[c, ih, iw, id_]
                    y[o, oh, ow, od] = acc
    return y_arr


def conv3d_bwd(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
               floating[:, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = x.shape[1], ww = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2], do = gy.shape[3]
    dt = _dtype(x[0, 0, 0, 0])
    gx_arr = np.zeros((ci, h, ww, d), dtype=dt)
    gw_arr = np.zeros((co, ci, k, k, k), dtype=dt)
    gb_arr = np.zeros(co, dtype=dt)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, :, ::1] gw = gw_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t o, c, oh, ow, od, kh, kw, kd, ih, iw, id_
    cdef floating g
    for o in range(co):
        for oh in range(ho):
            for ow in range(wo):
                for od in range(do):
                    g = gy[o, oh, ow, od]
                    gb[o] += g
                    for c in range(ci):
                        for kh in range(k):
                            ih = oh * stride + kh - pad
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - pad
                                if iw < 0 or iw >= ww:
                                    continue
                                for kd in range(k):
                                    id_ = od * stride + kd - pad
                                    if id_ < 0 or id_ >= d:
                                        continue
                                    gw[o, c, kh, kw, kd] += g * x[c, ih, iw, id_]
                                    gx[c, ih, iw, id_] += g * w[o, c, kh, kw, kd]
    return gx_arr, gw_arr, gb_arr


# --------------------------------------------------------------------------- #
# deconv3d
# --------------------------------------------------------------------------- #


def deconv3d_fwd(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                 floating[::1] b, int stride):
    cdef Py_ssize_t ci = w.shape[0], co = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = x.shape[1], ww = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t oh = (h - 1) * stride + k
    cdef Py_ssize_t ow = (ww - 1) * stride + k
    cdef Py_ssize_t od = (d - 1) * stride + k
    y_arr = np.empty((co, oh, ow, od), dtype=_dtype(x[0, 0, 0, 0]))
    cdef floating[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t o, c, ih, iw, id_, kh, kw, kd, a0, a1, a2
    cdef floating xv
    for o in range(co):
        for a0 in range(oh):
            for a1 in range(ow):
                for a2 in range(od):
                    y[o, a0, a1, a2] = b[o]
    for c in range(ci):
        for ih in range(h):
            for iw in range(ww):
                for id_ in range(d):
                    xv = x[c, ih, iw, id_]
                    for o in range(co):
                        for kh in range(k):
                            for kw in range(k):
                                for kd in range(k):
                                    y[o, ih * stride + kh, iw * stride + kw,
                                      id_ * stride + kd] += xv * w[c, o, kh, kw, kd]
    return y_arr


def deconv3d_bwd(floating[:, :, :, ::1] x, floating[:, :, :, :, ::1] w,
                 floating[:, :, :, ::1] gy, int stride):
    cdef Py_ssize_t ci = w.shape[0], co = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t h = x.shape[1], ww = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t oh = gy.shape[1], ow = gy.shape[2], od = gy.shape[3]
    dt = _dtype(x[0, 0, 0, 0])
    gx_arr = np.zeros((ci, h, ww, d), dtype=dt)
    gw_arr = np.zeros((ci, co, k, k, k), dtype=dt)
    gb_arr = np.zeros(co, dtype=dt)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef floating[:, :, :, :, ::1] gw = gw_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t o, c, ih, iw, id_, kh, kw, kd, a0, a1, a2
    cdef floating xv, g, accx
    for o in range(co):
        for a0 in range(oh):
            for a1 in range(ow):
                for a2 in range(od):
                    gb[o] += gy[o, a0, a1, a2]
    for c in range(ci):
        for ih in range(h):
            for iw in range(ww):
                for id_ in range(d):
                    xv = x[c, ih, iw, id_]
                    accx = 0
                    for o in range(co):
                        for kh in range(k):
                            for kw in range(k):
                                for kd in range(k):
                                    g = gy[o, ih * stride + kh, iw * stride + kw,
                                           id_ * stride + kd]
                                    accx += g * w[c, o, kh, kw, kd]
                                    gw[c, o, kh, kw, kd] += g * xv
                    gx[c, ih, iw, id_] = accx
    return gx_arr, gw_arr, gb_arr


# --------------------------------------------------------------------------- #
# selective scan
# --------------------------------------------------------------------------- #


def scan_fwd(floating[:, ::1] u, floating[:, ::1] dt, floating[:, ::1] A,
             floating[:, ::1] B, floating[:, ::1] C, floating[::1] D, int mode):
    cdef Py_ssize_t L = u.shape[0], di = u.shape[1], N = A.shape[1]
    dtp = _dtype(u[0, 0])
    y_arr = np.empty((L, di), dtype=dtp)
    h_arr = np.empty((L, di, N), dtype=dtp)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, :, ::1] h = h_arr
    cdef Py_ssize_t t, i, n
    cdef floating dv, uv, acc, av, coef, hprev, hv, da
    for t in range(L):
        for i in range(di):
            dv = dt[t, i]
            uv = u[t, i]
            acc = 0
            for n in range(N):
                da = dv * A[i, n]
                av = exp(da)
                if mode == 0:
                    coef = dv * B[t, n]
                else:
                    coef = expm1(da) / A[i, n] * B[t, n]
                hprev = h[t - 1, i, n] if t > 0 else <floating> 0
                hv = av * hprev + coef * uv
                h[t, i, n] = hv
                acc += C[t, n] * hv
            y[t, i] = acc + D[i] * uv
    return y_arr, h_arr


def scan_bwd(floating[:, ::1] u, floating[:, ::1] dt, floating[:, ::1] A,
             floating[:, ::1] B, floating[:, ::1] C, floating[::1] D,
             floating[:, :, ::1] h, floating[:, ::1] gy, int mode):
    cdef Py_ssize_t L = u.shape[0], di = u.shape[1], N = A.shape[1]
    dtp = _dtype(u[0, 0])
    gu_arr = np.zeros((L, di), dtype=dtp)
    gdt_arr = np.zeros((L, di), dtype=dtp)
    gA_arr = np.zeros((di, N), dtype=dtp)
    gB_arr = np.zeros((L, N), dtype=dtp)
    gC_arr = np.zeros((L, N), dtype=dtp)
    gD_arr = np.zeros(di, dtype=dtp)
    gh_arr = np.zeros((di, N), dtype=dtp)
    cdef floating[:, ::1] gu = gu_arr, gdt = gdt_arr, gA = gA_arr, gB = gB_arr, gC = gC_arr
    cdef floating[::1] gD = gD_arr
    cdef floating[:, ::1] gh = gh_arr
    cdef Py_ssize_t t, i, n
    cdef floating gyv, dv, uv, hv, ght, hprev, da, av, ga, gcoef, kv, gdt_acc, gu_acc
    for t in range(L - 1, -1, -1):
        for i in range(di):
            gyv = gy[t, i]
            dv = dt[t, i]
            uv = u[t, i]
            gu[t, i] += D[i] * gyv
            gD[i] += gyv * uv
            gdt_acc = 0
            gu_acc = 0
            for n in range(N):
                hv = h[t, i, n]
                gC[t, n] += gyv * hv
                ght = gh[i, n] + C[t, n] * gyv
                hprev = h[t - 1, i, n] if t > 0 else <floating> 0
                da = dv * A[i, n]
                av = exp(da)
                ga = ght * hprev
                gdt_acc += ga * A[i, n] * av
                gA[i, n] += ga * dv * av
                gcoef = ght * uv
                if mode == 0:
                    gB[t, n] += gcoef * dv
                    gdt_acc += gcoef * B[t, n]
                    gu_acc += ght * dv * B[t, n]
                else:
                    kv = expm1(da) / A[i, n]
                    gB[t, n] += gcoef * kv
                    gdt_acc += gcoef * B[t, n] * av
                    gA[i, n] += gcoef * B[t, n] * (dv * av - kv) / A[i, n]
                    gu_acc += ght * kv * B[t, n]
                gh[i, n] = ght * av
            gdt[t, i] += gdt_acc
            gu[t, i] += gu_acc
    return gu_arr, gdt_arr, gA_arr, gB_arr, gC_arr, gD_arr


# --------------------------------------------------------------------------- #
# radix-2 FFT over the trailing axis of [rows, n] buffers (in place)
# --------------------------------------------------------------------------- #


def fft1d_batch(floating[:, ::1] re, floating[:, ::1] im, cnp.intp_t[::1] perm,
                floating[::1] cos_t, floating[::1] sin_t, bint inverse):
    cdef Py_ssize_t rows = re.shape[0], n = re.shape[1]
    if n == 1:
        return
    dtp = _dtype(re[0, 0])
    sr_arr = np.empty(n, dtype=dtp)
    si_arr = np.empty(n, dtype=dtp)
    cdef floating[::1] sr = sr_arr, si = si_arr
    cdef floating sign = <floating> (-1.0) if inverse else <floating> 1.0
    cdef Py_ssize_t r, kk, half, m, step, j, start, i1, i2
    cdef floating c, s, vr, vi, tr, ti, ur, ui
    for r in range(rows):
        for kk in range(n):
            sr[kk] = re[r, perm[kk]]
            si[kk] = im[r, perm[kk]]
        for kk in range(n):
            re[r, kk] = sr[kk]
            im[r, kk] = si[kk]
    half = 1
    while half < n:
        m = half * 2
        step = n // m
        for r in range(rows):
            for j in range(half):
                c = cos_t[j * step]
                s = sign * sin_t[j * step]
                for start in range(0, n, m):
                    i1 = start + j
                    i2 = i1 + half
                    vr = re[r, i2]
                    vi = im[r, i2]
                    tr = vr * c + vi * s
                    ti = vi * c - vr * s
                    ur = re[r, i1]
                    ui = im[r, i1]
                    re[r, i1] = ur + tr
                    im[r, i1] = ui + ti
                    re[r, i2] = ur - tr
                    im[r, i2] = ui - ti
        half = m
