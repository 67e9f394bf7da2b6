"""Compiled direct-loop kernels for unit-stride valid 3D convolution.

These are the hot path of training. Each kernel walks output rows with a local
accumulator so LLVM can vectorize the innermost width loop; there is no im2col
data amplification. Strided convolutions and environments without numba fall
back to the blocked GEMM implementation in :mod:`voxelseg.layers`.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True, fastmath=True)
def conv_forward_s1(x, w, out):
    k_out, c_in, kd, kh, kw = w.shape
    od, oh, ow = out.shape[1], out.shape[2], out.shape[3]
    acc = np.empty(ow, dtype=x.dtype)
    for k in range(k_out):
        for zo in range(od):
            for yo in range(oh):
                acc[:] = 0.0
                for c in range(c_in):
                    for i in range(kd):
                        for j in range(kh):
                            xrow = x[c, zo + i, yo + j]
                            for l in range(kw):
                                wv = w[k, c, i, j, l]
                                for xo in range(ow):
                                    acc[xo] += wv * xrow[xo + l]
                out[k, zo, yo] = acc
    return out


@njit(cache=True, fastmath=True)
def conv_grad_x_s1(w, g, gx):
    k_out, c_in, kd, kh, kw = w.shape
    od, oh, ow = g.shape[1], g.shape[2], g.shape[3]
    for k in range(k_out):
        for zo in range(od):
            for yo in range(oh):
                grow = g[k, zo, yo]
                for c in range(c_in):
                    for i in range(kd):
                        for j in range(kh):
                            gxrow = gx[c, zo + i, yo + j]
                            for l in range(kw):
                                wv = w[k, c, i, j, l]
                                for xo in range(ow):
                                    gxrow[xo + l] += wv * grow[xo]
    return gx


@njit(cache=True, fastmath=True)
def conv_grad_w_s1(x, g, gw):
    k_out, c_in, kd, kh, kw = gw.shape
    od, oh, ow = g.shape[1], g.shape[2], g.shape[3]
    acc = np.zeros((kd, kh, kw), dtype=x.dtype)
    for k in range(k_out):
        for c in range(c_in):
            acc[:] = 0
            for zo in range(od):
                for yo in range(oh):
                    grow = g[k, zo, yo]
                    for i in range(kd):
                        for j in range(kh):
                            xrow = x[c, zo + i, yo + j]
                            for l in range(kw):
                                s = grow[0] * 0
                                for xo in range(ow):
                                    s += grow[xo] * xrow[xo + l]
                                acc[i, j, l] += s
            gw[k, c] = acc
    return gw
