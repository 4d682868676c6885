"""Compiled loops for 2D depthwise correlation.

numpy evaluates a depthwise correlation as one full-size temporary per
kernel offset, which is bound by memory traffic.  These fused loops keep
the channel axis innermost and accumulate in float64.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def dw2d_forward(xp, w, stride, ho, wo):
    n_batch = xp.shape[0]
    kh, kw, G = w.shape
    out = np.zeros((n_batch, ho, wo, G))
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    for b in range(kw):
                        for c in range(G):
                            out[n, i, j, c] += xp[n, i * stride + a, j * stride + b, c] * w[a, b, c]
    return out


@njit(cache=True)
def dw2d_weight_grad(xp, g, stride, kh, kw):
    n_batch, ho, wo, G = g.shape
    gw = np.zeros((kh, kw, G))
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    for b in range(kw):
                        for c in range(G):
                            gw[a, b, c] += xp[n, i * stride + a, j * stride + b, c] * g[n, i, j, c]
    return gw


@njit(cache=True)
def dw2d_input_grad(g, w, stride, hp, wp):
    n_batch, ho, wo, G = g.shape
    kh, kw = w.shape[0], w.shape[1]
    gxp = np.zeros((n_batch, hp, wp, G))
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for a in range(kh):
                    for b in range(kw):
                        for c in range(G):
                            gxp[n, i * stride + a, j * stride + b, c] += g[n, i, j, c] * w[a, b, c]
    return gxp
