"""Numba kernels with a fixed floating-point operation order.

Every output entry of the products is accumulated as ``((0 + a0*b0) + a1*b1) + ...``
with ascending inner index, independent of how many rows are processed at
once. Batched and per-sample paths therefore agree bit for bit.
"""
import math

import numpy as np
from numba import njit

_KC = 256


@njit(nogil=True, cache=True)
def matmul_into(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    i = 0
    while i + 4 <= m:
        for j in range(n):
            out[i, j] = 0.0
            out[i + 1, j] = 0.0
            out[i + 2, j] = 0.0
            out[i + 3, j] = 0.0
        for k in range(kk):
            a0 = a[i, k]
            a1 = a[i + 1, k]
            a2 = a[i + 2, k]
            a3 = a[i + 3, k]
            for j in range(n):
                bk = b[k, j]
                out[i, j] += a0 * bk
                out[i + 1, j] += a1 * bk
                out[i + 2, j] += a2 * bk
                out[i + 3, j] += a3 * bk
        i += 4
    while i < m:
        for j in range(n):
            out[i, j] = 0.0
        for k in range(kk):
            a0 = a[i, k]
            for j in range(n):
                out[i, j] += a0 * b[k, j]
        i += 1
    return out


@njit(nogil=True, cache=True)
def matmul_nt_into(a, b, out):
    """out = a @ b.T, blocked 4x4 in registers and chunked along k for cache."""
    return _nt_blocked(a, b, out, False)


@njit(nogil=True, cache=True)
def gram_upper_into(a, out):
    """Upper triangle (plus the 4x4 diagonal blocks) of a @ a.T; other entries stay 0.

    Computed entries are bit-identical to :func:`matmul_nt_into`.
    """
    return _nt_blocked(a, a, out, True)


@njit(nogil=True, cache=True)
def _nt_blocked(a, b, out, upper):
    m, kk = a.shape
    n = b.shape[0]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
    for k0 in range(0, kk, _KC):
        k1 = min(kk, k0 + _KC)
        i = 0
        while i < m:
            if i + 4 <= m:
                j = i if upper else 0
                while j < n:
                    if j + 4 <= n:
                        s00 = out[i, j]
                        s01 = out[i, j + 1]
                        s02 = out[i, j + 2]
                        s03 = out[i, j + 3]
                        s10 = out[i + 1, j]
                        s11 = out[i + 1, j + 1]
                        s12 = out[i + 1, j + 2]
                        s13 = out[i + 1, j + 3]
                        s20 = out[i + 2, j]
                        s21 = out[i + 2, j + 1]
                        s22 = out[i + 2, j + 2]
                        s23 = out[i + 2, j + 3]
                        s30 = out[i + 3, j]
                        s31 = out[i + 3, j + 1]
                        s32 = out[i + 3, j + 2]
                        s33 = out[i + 3, j + 3]
                        for k in range(k0, k1):
                            x0 = a[i, k]
                            x1 = a[i + 1, k]
                            x2 = a[i + 2, k]
                            x3 = a[i + 3, k]
                            y0 = b[j, k]
                            y1 = b[j + 1, k]
                            y2 = b[j + 2, k]
                            y3 = b[j + 3, k]
                            s00 += x0 * y0
                            s01 += x0 * y1
                            s02 += x0 * y2
                            s03 += x0 * y3
                            s10 += x1 * y0
                            s11 += x1 * y1
                            s12 += x1 * y2
                            s13 += x1 * y3
                            s20 += x2 * y0
                            s21 += x2 * y1
                            s22 += x2 * y2
                            s23 += x2 * y3
                            s30 += x3 * y0
                            s31 += x3 * y1
                            s32 += x3 * y2
                            s33 += x3 * y3
                        out[i, j] = s00
                        out[i, j + 1] = s01
                        out[i, j + 2] = s02
                        out[i, j + 3] = s03
                        out[i + 1, j] = s10
                        out[i + 1, j + 1] = s11
                        out[i + 1, j + 2] = s12
                        out[i + 1, j + 3] = s13
                        out[i + 2, j] = s20
                        out[i + 2, j + 1] = s21
                        out[i + 2, j + 2] = s22
                        out[i + 2, j + 3] = s23
                        out[i + 3, j] = s30
                        out[i + 3, j + 1] = s31
                        out[i + 3, j + 2] = s32
                        out[i + 3, j + 3] = s33
                        j += 4
                    else:
                        for ii in range(i, i + 4):
                            s = out[ii, j]
                            for k in range(k0, k1):
                                s += a[ii, k] * b[j, k]
                            out[ii, j] = s
                        j += 1
                i += 4
            else:
                for j in range(i if upper else 0, n):
                    s = out[i, j]
                    for k in range(k0, k1):
                        s += a[i, k] * b[j, k]
                    out[i, j] = s
                i += 1
    return out


@njit(nogil=True, cache=True)
def tanh_into(x, out):
    for i in range(x.size):
        out[i] = math.tanh(x[i])
    return out


@njit(nogil=True, cache=True)
def im2col(x, kh, kw, out):
    """x: (N, C, H, W) -> out: (N, Ho*Wo, C*kh*kw), valid padding, stride 1."""
    n, c, h, w = x.shape
    ho = h - kh + 1
    wo = w - kw + 1
    for s in range(n):
        for y in range(ho):
            for xx in range(wo):
                row = y * wo + xx
                col = 0
                for ci in range(c):
                    for dy in range(kh):
                        for dx in range(kw):
                            out[s, row, col] = x[s, ci, y + dy, xx + dx]
                            col += 1
    return out


@njit(nogil=True, cache=True)
def col2im(cols, c, h, w, kh, kw, out):
    """Adjoint of im2col: scatter-add (N, Ho*Wo, C*kh*kw) into (N, C, H, W)."""
    n = cols.shape[0]
    ho = h - kh + 1
    wo = w - kw + 1
    for s in range(n):
        for ci in range(c):
            for yy in range(h):
                for xx in range(w):
                    out[s, ci, yy, xx] = 0.0
        for y in range(ho):
            for xx in range(wo):
                row = y * wo + xx
                col = 0
                for ci in range(c):
                    for dy in range(kh):
                        for dx in range(kw):
                            out[s, ci, y + dy, xx + dx] += cols[s, row, col]
                            col += 1
    return out


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)


@njit(cache=True)
def splitmix64_fill(state, out):
    """Fill ``out`` with successive SplitMix64 outputs; returns the new state."""
    s = state
    for i in range(out.size):
        s = s + _GAMMA
        z = s
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        out[i] = z ^ (z >> _S31)
    return s


@njit(cache=True)
def box_muller_fill(words, out):
    """Map pairs of 64-bit words to pairs of standard normals."""
    scale = 1.0 / 9007199254740992.0
    for p in range(out.size // 2):
        u1 = 1.0 - float(words[2 * p] >> _S11) * scale
        u2 = float(words[2 * p + 1] >> _S11) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        out[2 * p] = r * math.cos(2.0 * math.pi * u2)
        out[2 * p + 1] = r * math.sin(2.0 * math.pi * u2)
    return out


@njit(nogil=True, cache=True)
def outer_into(delta, a, out, col):
    """out[s, q, col + o*m + i] = delta[s, q, o] * a[s, i] (Dense weight gradients)."""
    n, r, nout = delta.shape
    m = a.shape[1]
    for s in range(n):
        for q in range(r):
            for o in range(nout):
                d = delta[s, q, o]
                base = col + o * m
                for i in range(m):
                    out[s, q, base + i] = d * a[s, i]
    return out
