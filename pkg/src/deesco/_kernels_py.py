"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw, ph, pw, oh, ow):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (n, c, oh, ow, kh, kw) -> (n, c, kh, kw, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow):
    n = cols.shape[0]
    hp, wp = h + 2 * ph, w + 2 * pw
    # padded canvas must hold the furthest window even when it overhangs
    hp = max(hp, (oh - 1) * sh + kh)
    wp = max(wp, (ow - 1) * sw + kw)
    xp = np.zeros((n, c, hp, wp))
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += cols[:, :, i, j]
    return xp[:, :, ph : ph + h, pw : pw + w]


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
