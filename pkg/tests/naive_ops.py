"""Independent brute-force reference implementations used as test oracles.

These deliberately share no code with the package: convolution is a direct
summation over every output position, dense and batch norm are written from
their definitions.  Slow and only for small tensors.
"""
import numpy as np


def conv2d_naive(x, w, bias):
    """Direct-summation same-padded cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((b, f, h, wd))
    for bi in range(b):
        for fi in range(f):
            for y in range(h):
                for xx in range(wd):
                    acc = bias[fi]
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                yy, xc = y + dy - ph, xx + dx - pw
                                if 0 <= yy < h and 0 <= xc < wd:
                                    acc += x[bi, ci, yy, xc] * w[fi, ci, dy, dx]
                    out[bi, fi, y, xx] = acc
    return out


def dense_naive(x, w, bias):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[0], w.shape[0]))
    for bi in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[bi, o] = bias[o] + sum(x[bi, i] * w[o, i] for i in range(w.shape[1]))
    return out


def batchnorm_naive(x, gamma, beta, eps):
    """Train-mode standardization over (batch, height, width) per channel."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c]
        mean = vals.mean()
        var = vals.var()
        out[:, c] = gamma[c] * (vals - mean) / np.sqrt(var + eps) + beta[c]
    return out
