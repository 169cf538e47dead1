# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled gather/scatter kernels for strided 3-D convolution.

Same contracts as ``sghfnet._kernels_py``; results are bitwise identical.
Arrays are handled through flattened views: ``(B*C, D, H, W)`` images and
``(B*C, kd*kh*kw, od*oh*ow)`` columns.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3d(xp, int kd, int kh, int kw, int sd, int sh, int sw, int od, int oh, int ow):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef const double[:, :, :, ::1] img = xp.reshape(nb * nc, xp.shape[2], xp.shape[3], xp.shape[4])
    out = np.empty((nb, nc, kd, kh, kw, od, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] cols = out.reshape(nb * nc, kd * kh * kw, od * oh * ow)
    cdef Py_ssize_t n, i, j, k, z, y, x, zz, yy, kk, pp
    with nogil:
        for n in range(nb * nc):
            kk = 0
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        pp = 0
                        for z in range(od):
                            zz = i + z * sd
                            for y in range(oh):
                                yy = j + y * sh
                                for x in range(ow):
                                    cols[n, kk, pp] = img[n, zz, yy, k + x * sw]
                                    pp = pp + 1
                        kk = kk + 1
    return out


def col2im3d(cols_in, int dp, int hp, int wp, int sd, int sh, int sw):
    cdef Py_ssize_t nb = cols_in.shape[0], nc = cols_in.shape[1]
    cdef Py_ssize_t kd = cols_in.shape[2], kh = cols_in.shape[3], kw = cols_in.shape[4]
    cdef Py_ssize_t od = cols_in.shape[5], oh = cols_in.shape[6], ow = cols_in.shape[7]
    cdef const double[:, :, ::1] cols = cols_in.reshape(nb * nc, kd * kh * kw, od * oh * ow)
    out = np.zeros((nb, nc, dp, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] img = out.reshape(nb * nc, dp, hp, wp)
    cdef Py_ssize_t n, i, j, k, z, y, x, zz, yy, kk, pp
    with nogil:
        for n in range(nb * nc):
            kk = 0
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        pp = 0
                        for z in range(od):
                            zz = i + z * sd
                            for y in range(oh):
                                yy = j + y * sh
                                for x in range(ow):
                                    img[n, zz, yy, k + x * sw] += cols[n, kk, pp]
                                    pp = pp + 1
                        kk = kk + 1
    return out
