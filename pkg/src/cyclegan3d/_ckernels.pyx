# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels behind the 3D convolutions.

Row layout of a column matrix is ((c*kd + a)*kh + b)*kw + e, matching a
weight of shape (c_out, c_in, kd, kh, kw) reshaped to (c_out, c_in*kd*kh*kw).
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def vol2col(floating[:, :, :, :, ::1] x, int kd, int kh, int kw,
            int sd, int sh, int sw, int od, int oh, int ow):
    cdef Py_ssize_t n_batch = x.shape[0], n_chan = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t n, c, a, b, e, i, j, k, row, n_rows = n_chan * kd * kh * kw, n_cols = od * oh * ow
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n_batch, n_rows, n_cols), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    if n_batch == 0 or n_rows == 0 or n_cols == 0:
        return out
    with nogil:
        for n in range(n_batch):
            for c in range(n_chan):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            dst = &cols[n, row, 0]
                            for i in range(od):
                                for j in range(oh):
                                    src = &x[n, c, a + i * sd, b + j * sh, e]
                                    for k in range(ow):
                                        dst[k] = src[k * sw]
                                    dst += ow
    return out


def col2vol(floating[:, :, ::1] cols, int n_chan, int depth, int height, int width,
            int kd, int kh, int kw, int sd, int sh, int sw, int od, int oh, int ow):
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t n, c, a, b, e, i, j, k, row
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n_batch, n_chan, depth, height, width), dtype=dtype)
    cdef floating[:, :, :, :, ::1] vol = out
    if n_batch == 0 or n_chan == 0 or od * oh * ow == 0:
        return out
    with nogil:
        for n in range(n_batch):
            for c in range(n_chan):
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            row = ((c * kd + a) * kh + b) * kw + e
                            src = &cols[n, row, 0]
                            for i in range(od):
                                for j in range(oh):
                                    dst = &vol[n, c, a + i * sd, b + j * sh, e]
                                    for k in range(ow):
                                        dst[k * sw] += src[k]
                                    src += ow
    return out
