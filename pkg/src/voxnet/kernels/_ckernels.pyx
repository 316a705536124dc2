# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled volumetric kernels: im2col/col2im gather-scatter and max pooling."""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


from libc.string cimport memcpy, memset


def im2col3d(floating[:, :, :, ::1] x, int kd, int kh, int kw,
             int sd, int sh, int sw, int pd, int ph, int pw,
             int od, int oh, int ow):
    """Gather a channels-last volume (D, H, W, ci) into rows.

    Row ``(z*oh + y)*ow + x`` holds the receptive field of that output voxel,
    laid out as (kd, kh, kw, ci). Padded reads are zeros.
    """
    cdef int D = x.shape[0]
    cdef int H = x.shape[1]
    cdef int W = x.shape[2]
    cdef int ci = x.shape[3]
    cdef Py_ssize_t K = <Py_ssize_t>kd * kh * kw * ci
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((<Py_ssize_t>od * oh * ow, K), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef floating* dst
    cdef size_t chunk = ci * sizeof(floating)
    cdef int z, y, xx, i, j, k, iz, iy, ix
    with nogil:
        dst = &cols[0, 0]
        for z in range(od):
            for y in range(oh):
                for xx in range(ow):
                    for i in range(kd):
                        iz = z * sd - pd + i
                        for j in range(kh):
                            iy = y * sh - ph + j
                            for k in range(kw):
                                ix = xx * sw - pw + k
                                if iz < 0 or iz >= D or iy < 0 or iy >= H or ix < 0 or ix >= W:
                                    if ci == 1:
                                        dst[0] = 0
                                    else:
                                        memset(dst, 0, chunk)
                                elif ci == 1:
                                    dst[0] = x[iz, iy, ix, 0]
                                else:
                                    memcpy(dst, &x[iz, iy, ix, 0], chunk)
                                dst += ci
    return out


def col2im3d(floating[:, ::1] cols, int D, int H, int W, int ci,
             int kd, int kh, int kw, int sd, int sh, int sw,
             int pd, int ph, int pw, int od, int oh, int ow):
    """Scatter-add rows back to a channels-last (D, H, W, ci) volume.

    Kernel offsets form the outer loop so every voxel receives its
    contributions in ascending (i, j, k) order.
    """
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((D, H, W, ci), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef floating* src
    cdef floating* dst
    cdef Py_ssize_t K = cols.shape[1]
    cdef Py_ssize_t off
    cdef int z, y, xx, i, j, k, iz, iy, ix, c
    with nogil:
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    off = ((<Py_ssize_t>i * kh + j) * kw + k) * ci
                    for z in range(od):
                        iz = z * sd - pd + i
                        if iz < 0 or iz >= D:
                            continue
                        for y in range(oh):
                            iy = y * sh - ph + j
                            if iy < 0 or iy >= H:
                                continue
                            for xx in range(ow):
                                ix = xx * sw - pw + k
                                if ix < 0 or ix >= W:
                                    continue
                                src = &cols[(<Py_ssize_t>z * oh + y) * ow + xx, off]
                                dst = &dx[iz, iy, ix, 0]
                                for c in range(ci):
                                    dst[c] += src[c]
    return out


def maxpool3d_forward(floating[:, :, :, :, ::1] x, int wd, int wh, int ww,
                      int sd, int sh, int sw, int od, int oh, int ow):
    """Windowed max with flat argmax into ``x``; ties keep the lowest index."""
    cdef int B = x.shape[0]
    cdef int C = x.shape[1]
    cdef int D = x.shape[2]
    cdef int H = x.shape[3]
    cdef int W = x.shape[4]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C, od, oh, ow), dtype=dtype)
    idx = np.empty((B, C, od, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, :, ::1] am = idx
    cdef int b, c, z, y, xx, i, j, k, iz, iy, ix
    cdef floating best, v
    cdef cnp.int64_t best_at, vol_base
    with nogil:
        for b in range(B):
            for c in range(C):
                vol_base = (<cnp.int64_t>b * C + c) * D * H * W
                for z in range(od):
                    for y in range(oh):
                        for xx in range(ow):
                            best = x[b, c, z * sd, y * sh, xx * sw]
                            best_at = vol_base + ((<cnp.int64_t>z * sd) * H + y * sh) * W + xx * sw
                            for i in range(wd):
                                iz = z * sd + i
                                for j in range(wh):
                                    iy = y * sh + j
                                    for k in range(ww):
                                        ix = xx * sw + k
                                        v = x[b, c, iz, iy, ix]
                                        if v > best:
                                            best = v
                                            best_at = vol_base + (<cnp.int64_t>iz * H + iy) * W + ix
                            o[b, c, z, y, xx] = best
                            am[b, c, z, y, xx] = best_at
    return out, idx


def maxpool3d_backward(floating[::1] grad, cnp.int64_t[::1] argmax, Py_ssize_t size):
    """Route flat output gradients to their argmax positions (accumulating)."""
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(size, dtype=dtype)
    cdef floating[::1] dx = out
    cdef Py_ssize_t n = grad.shape[0]
    cdef Py_ssize_t t
    with nogil:
        for t in range(n):
            dx[argmax[t]] += grad[t]
    return out
