"""Pure numpy versions of the convolution gather/scatter kernels.

Both functions operate on 5-D arrays ``(B, C, D, H, W)``; 2-D convolution is
routed through them with a singleton depth axis.  The column layout is
``(B, C, kd, kh, kw, od, oh, ow)`` so that a reshape to
``(B, C*kd*kh*kw, od*oh*ow)`` feeds straight into a GEMM.
"""

import numpy as np


def im2col3d(xp, kd, kh, kw, sd, sh, sw, od, oh, ow):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kd, kh, kw, od, oh, ow), dtype=np.float64)
    for i in range(kd):
        iend = i + sd * od
        for j in range(kh):
            jend = j + sh * oh
            for k in range(kw):
                cols[:, :, i, j, k] = xp[:, :, i:iend:sd, j:jend:sh, k:k + sw * ow:sw]
    return cols


def col2im3d(cols, dp, hp, wp, sd, sh, sw):
    # accumulation order (kernel offsets lexicographic) is shared with the
    # compiled kernel so both backends agree bitwise
    b, c, kd, kh, kw, od, oh, ow = cols.shape
    out = np.zeros((b, c, dp, hp, wp), dtype=np.float64)
    for i in range(kd):
        iend = i + sd * od
        for j in range(kh):
            jend = j + sh * oh
            for k in range(kw):
                out[:, :, i:iend:sd, j:jend:sh, k:k + sw * ow:sw] += cols[:, :, i, j, k]
    return out
