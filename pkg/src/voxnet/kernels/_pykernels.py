"""Pure-numpy versions of the compiled kernels.

Each function returns results bitwise identical to its compiled twin: the
scatter loops add contributions in the same (channel, kernel offset) order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(x, kd, kh, kw, sd, sh, sw, pd, ph, pw, od, oh, ow):
    ci = x.shape[3]
    xp = np.pad(x, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(0, 1, 2))
    win = win[: (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (od, oh, ow, ci, kd, kh, kw) -> (od, oh, ow, kd, kh, kw, ci)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3))
    return cols.reshape(od * oh * ow, kd * kh * kw * ci)


def col2im3d(cols, D, H, W, ci, kd, kh, kw, sd, sh, sw, pd, ph, pw, od, oh, ow):
    dxp = np.zeros((D + 2 * pd, H + 2 * ph, W + 2 * pw, ci), dtype=cols.dtype)
    c7 = cols.reshape(od, oh, ow, kd, kh, kw, ci)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                dxp[i : i + sd * od : sd, j : j + sh * oh : sh, k : k + sw * ow : sw] += c7[:, :, :, i, j, k]
    return np.ascontiguousarray(dxp[pd : pd + D, ph : ph + H, pw : pw + W])


def maxpool3d_forward(x, wd, wh, ww, sd, sh, sw, od, oh, ow):
    B, C, D, H, W = x.shape
    win = sliding_window_view(x, (wd, wh, ww), axis=(2, 3, 4))
    win = win[:, :, : (od - 1) * sd + 1 : sd, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    flat = win.reshape(B, C, od, oh, ow, wd * wh * ww)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    i, rem = np.divmod(local, wh * ww)
    j, k = np.divmod(rem, ww)
    z = np.arange(od).reshape(-1, 1, 1) * sd + i
    y = np.arange(oh).reshape(1, -1, 1) * sh + j
    xx = np.arange(ow).reshape(1, 1, -1) * sw + k
    base = (np.arange(B).reshape(-1, 1) * C + np.arange(C).reshape(1, -1)) * (D * H * W)
    idx = base[:, :, None, None, None] + (z * H + y) * W + xx
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool3d_backward(grad, argmax, size):
    dx = np.zeros(size, dtype=grad.dtype)
    np.add.at(dx, argmax, grad)
    return dx
