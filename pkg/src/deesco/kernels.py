"""Backend selection for the hot kernels (im2col, col2im and the ADAM update).

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``DEESCO_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DEESCO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels as compiled

        _impl = compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names


def im2col(x, kernel, stride, pad, out_hw):
    """Unfold ``x`` (N, C, H, W) into columns (N, C*kh*kw, OH*OW)."""
    (kh, kw), (sh, sw), (ph, pw), (oh, ow) = kernel, stride, pad, out_hw
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.im2col(x, kh, kw, sh, sw, ph, pw, oh, ow)


def col2im(cols, shape, kernel, stride, pad, out_hw):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an (N, C, H, W) grid."""
    _, c, h, w = shape
    (kh, kw), (sh, sw), (ph, pw), (oh, ow) = kernel, stride, pad, out_hw
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return _impl.col2im(cols, c, h, w, kh, kw, sh, sw, ph, pw, oh, ow)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    """In-place ADAM update of contiguous float64 arrays ``p``, ``m``, ``v``."""
    _impl.adam_update(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                      m.reshape(-1), v.reshape(-1), lr, beta1, beta2, c1, c2, eps)
