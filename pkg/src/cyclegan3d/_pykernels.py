"""Pure-NumPy fallback for the compiled gather/scatter kernels.

Both functions walk kernel offsets in the same order as the compiled
version, so the scatter-add in :func:`col2vol` accumulates identically.
"""
import numpy as np


def vol2col(x, kd, kh, kw, sd, sh, sw, od, oh, ow):
    n, c = x.shape[:2]
    cols = np.empty((n, c, kd, kh, kw, od, oh, ow), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                cols[:, :, a, b, e] = x[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, e:e + sw * ow:sw]
    return cols.reshape(n, c * kd * kh * kw, od * oh * ow)


def col2vol(cols, n_chan, depth, height, width, kd, kh, kw, sd, sh, sw, od, oh, ow):
    n = cols.shape[0]
    vol = np.zeros((n, n_chan, depth, height, width), dtype=cols.dtype)
    blocks = cols.reshape(n, n_chan, kd, kh, kw, od, oh, ow)
    for a in range(kd):
        for b in range(kh):
            for e in range(kw):
                vol[:, :, a:a + sd * od:sd, b:b + sh * oh:sh, e:e + sw * ow:sw] += blocks[:, :, a, b, e]
    return vol
