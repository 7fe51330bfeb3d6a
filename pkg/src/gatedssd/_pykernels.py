"""Pure-numpy convolution kernels; the fallback when the compiled core is absent."""

import numpy as np


def _out_hw(H, W, kh, kw, sh, sw, ph, pw):
    return (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(x, kh, kw, sh, sw, ph, pw):
    N, C, H, W = x.shape
    OH, OW = _out_hw(H, W, kh, kw, sh, sw, ph, pw)
    xp = _pad(x, ph, pw)
    cols = np.empty((N, C, kh, kw, OH, OW), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw]
    return cols.reshape(N, C * kh * kw, OH * OW)


def col2im(cols, N, C, H, W, kh, kw, sh, sw, ph, pw):
    OH, OW = _out_hw(H, W, kh, kw, sh, sw, ph, pw)
    cols = cols.reshape(N, C, kh, kw, OH, OW)
    dxp = np.zeros((N, C, H + 2 * ph, W + 2 * pw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw] += cols[:, :, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + H, pw:pw + W])


def depthwise_forward(x, w, b, sh, sw, ph, pw):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    OH, OW = _out_hw(H, W, kh, kw, sh, sw, ph, pw)
    xp = _pad(x, ph, pw)
    if O != C:
        xp = np.repeat(xp, O // C, axis=1)
    out = np.zeros((N, O, OH, OW), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, 0, i, j, None, None] * xp[:, :, i:i + sh * OH:sh, j:j + sw * OW:sw]
    out += b[None, :, None, None]
    return out


def depthwise_backward(x, w, dy, sh, sw, ph, pw):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    OH, OW = dy.shape[2], dy.shape[3]
    xp = _pad(x, ph, pw)
    if O != C:
        xp = np.repeat(xp, O // C, axis=1)
    dxp = np.zeros_like(xp)
    dw = np.zeros((O, 1, kh, kw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            window = (slice(None), slice(None), slice(i, i + sh * OH, sh), slice(j, j + sw * OW, sw))
            dw[:, 0, i, j] = np.einsum("nohw,nohw->o", dy, xp[window])
            dxp[window] += w[None, :, 0, i, j, None, None] * dy
    if O != C:
        dxp = dxp.reshape(N, C, O // C, H + 2 * ph, W + 2 * pw).sum(axis=2)
    return np.ascontiguousarray(dxp[:, :, ph:ph + H, pw:pw + W]), dw
