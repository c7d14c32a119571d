"""JIT inner loops for the convolution primitives and the optimizer update.

These exist because the toolkit trains in float64 on plain CPUs where the
equivalent numpy formulations are dominated by permuted-copy bandwidth.
Every kernel is a straight transcription of the obvious loop nest; padding
is virtual (out-of-range taps read as zero) so no padded temporaries are
made. Kernels are single-threaded on purpose: the arrays are a few MB and
thread-pool handoffs against the BLAS pool cost more than they save, and
serial loops keep results bit-deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw, stride, pad, cols):
    """Fill cols (n*eh*ew, c*kh*kw) with patches of x (n, c, h, w)."""
    n, c, h, w = x.shape
    eh = (h + 2 * pad - kh) // stride + 1
    ew = (w + 2 * pad - kw) // stride + 1
    for row in range(n * eh * ew):
        ni = row // (eh * ew)
        rem = row % (eh * ew)
        e = rem // ew
        f = rem % ew
        hb = e * stride - pad
        wb = f * stride - pad
        idx = 0
        for ci in range(c):
            for r in range(kh):
                hr = hb + r
                inside_h = 0 <= hr < h
                for s in range(kw):
                    ws = wb + s
                    if inside_h and 0 <= ws < w:
                        cols[row, idx] = x[ni, ci, hr, ws]
                    else:
                        cols[row, idx] = 0.0
                    idx += 1


@njit(cache=True)
def col2im_add(dcols, kh, kw, stride, pad, dx):
    """Scatter-add cols gradients back onto dx (n, c, h, w)."""
    n, c, h, w = dx.shape
    eh = (h + 2 * pad - kh) // stride + 1
    ew = (w + 2 * pad - kw) // stride + 1
    for ni in range(n):
        for e in range(eh):
            for f in range(ew):
                row = (ni * eh + e) * ew + f
                hb = e * stride - pad
                wb = f * stride - pad
                idx = 0
                for ci in range(c):
                    for r in range(kh):
                        hr = hb + r
                        inside_h = 0 <= hr < h
                        for s in range(kw):
                            ws = wb + s
                            if inside_h and 0 <= ws < w:
                                dx[ni, ci, hr, ws] += dcols[row, idx]
                            idx += 1


@njit(cache=True)
def nchw_to_rows(src, dst):
    """(n, m, e, f) -> (n*e*f, m) row gather for the weight-gradient GEMM."""
    n, m, e, f = src.shape
    for row in range(n * e * f):
        ni = row // (e * f)
        rem = row % (e * f)
        ei = rem // f
        fi = rem % f
        for mi in range(m):
            dst[row, mi] = src[ni, mi, ei, fi]


@njit(cache=True)
def depthwise_fwd(x, w, pad, out):
    """Per-channel convolution: x (n,c,h,w), w (c,kh,kw) -> out (n,c,eh,ew)."""
    n, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    eh = h + 2 * pad - kh + 1
    ew = wd + 2 * pad - kw + 1
    for i in range(n * c):
        ni = i // c
        ci = i % c
        for e in range(eh):
            for f in range(ew):
                acc = 0.0
                for r in range(kh):
                    hr = e - pad + r
                    if hr < 0 or hr >= h:
                        continue
                    for s in range(kw):
                        ws = f - pad + s
                        if 0 <= ws < wd:
                            acc += x[ni, ci, hr, ws] * w[ci, r, s]
                out[ni, ci, e, f] = acc


@njit(cache=True)
def depthwise_dx(g, w, pad, dx):
    n, c, h, wd = dx.shape
    kh, kw = w.shape[1], w.shape[2]
    eh, ew = g.shape[2], g.shape[3]
    for i in range(n * c):
        ni = i // c
        ci = i % c
        for e in range(eh):
            for f in range(ew):
                gv = g[ni, ci, e, f]
                for r in range(kh):
                    hr = e - pad + r
                    if hr < 0 or hr >= h:
                        continue
                    for s in range(kw):
                        ws = f - pad + s
                        if 0 <= ws < wd:
                            dx[ni, ci, hr, ws] += gv * w[ci, r, s]


@njit(cache=True)
def depthwise_dw(g, x, pad, dw):
    n, c, h, wd = x.shape
    kh, kw = dw.shape[1], dw.shape[2]
    eh, ew = g.shape[2], g.shape[3]
    for ci in range(c):
        for r in range(kh):
            for s in range(kw):
                acc = 0.0
                for ni in range(n):
                    for e in range(eh):
                        hr = e - pad + r
                        if hr < 0 or hr >= h:
                            continue
                        for f in range(ew):
                            ws = f - pad + s
                            if 0 <= ws < wd:
                                acc += g[ni, ci, e, f] * x[ni, ci, hr, ws]
                dw[ci, r, s] = acc


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, wd, c1, c2):
    """One fused decoupled-weight-decay Adam step over flat views."""
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        step = lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        p[i] = p[i] - step - lr * wd * p[i]
