"""Hot numeric kernels behind the autodiff ops.

Two interchangeable backends provide the same four functions:

``conv3d_forward(x, w, b)``
    3x3x3 correlation, stride 1, zero padding 1. ``x`` is ``(N, Ci, X, Y, Z)``,
    ``w`` is ``(Co, Ci, 3, 3, 3)``, ``b`` is ``(Co,)``.
``conv3d_backward(x, w, dy, need_dx)``
    Returns ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false.
``maxpool3d_forward(x)``
    2x2x2 max pooling, stride 2. Returns ``(y, arg)`` where ``arg`` encodes the
    in-window offset of the max as ``dx*4 + dy*2 + dz`` (uint8). Ties go to the
    lowest linear index of the input, i.e. the first maximum in scan order.
``maxpool3d_backward(arg, dy, spatial)``
    Scatters ``dy`` back through the recorded argmax positions.

The compiled backend (a Cython extension doing a fused padded im2col into a
BLAS GEMM) is preferred when importable. Set ``GRADCAMO_KERNELS`` to ``numpy``
or ``compiled`` to force one; ``auto`` (the default) falls back silently.

All functions expect C-contiguous float32 or float64 arrays; the op layer
guarantees that. Both backends share the GEMM-based formulation so results
agree bit for bit on the same BLAS.
"""

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gradcamo.errors import ValidationError

__all__ = [
    "BACKEND",
    "conv3d_forward",
    "conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "get_backend",
    "available_backends",
]


def _np_im2col(x):
    # (N, Ci, X, Y, Z) -> (N, Ci*27, X*Y*Z) with rows in (ci, dx, dy, dz) order
    # and columns in (i, j, k) order, matching the flattened weight layout.
    n, ci, sx, sy, sz = x.shape
    xpad = np.zeros((n, ci, sx + 2, sy + 2, sz + 2), dtype=x.dtype)
    xpad[:, :, 1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xpad, (3, 3, 3), axis=(2, 3, 4))
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, ci * 27, sx * sy * sz)
    return np.ascontiguousarray(cols)


def _np_conv3d_forward(x, w, b):
    n, ci, sx, sy, sz = x.shape
    co = w.shape[0]
    cols = _np_im2col(x)
    wf = w.reshape(co, ci * 27)
    y = np.matmul(wf[None, :, :], cols)
    y += b[:, None]
    return y.reshape(n, co, sx, sy, sz)


def _np_conv3d_backward(x, w, dy, need_dx=True):
    n, ci, sx, sy, sz = x.shape
    co = w.shape[0]
    cols = _np_im2col(x)
    dyf = dy.reshape(n, co, sx * sy * sz)
    dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3, 4))
    dx = None
    if need_dx:
        # Correlating the upstream gradient with the flipped, channel-swapped
        # filter bank under the same padding yields the input gradient.
        wswap = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = _np_conv3d_forward(dy, wswap, np.zeros(ci, dtype=w.dtype))
    return dx, dw, db


def _np_maxpool3d_forward(x):
    n, c, sx, sy, sz = x.shape
    hx, hy, hz = sx // 2, sy // 2, sz // 2
    r = x.reshape(n, c, hx, 2, hy, 2, hz, 2)
    r = r.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, hx, hy, hz, 8)
    y = r.max(axis=-1)
    # argmax returns the first maximum; window axes are laid out (dx, dy, dz)
    # so "first" is exactly the lowest linear index in the input volume.
    arg = r.argmax(axis=-1).astype(np.uint8)
    return np.ascontiguousarray(y), arg


def _np_maxpool3d_backward(arg, dy, spatial):
    sx, sy, sz = spatial
    n, c, hx, hy, hz = dy.shape
    windows = np.zeros((n, c, hx, hy, hz, 8), dtype=dy.dtype)
    np.put_along_axis(windows, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = windows.reshape(n, c, hx, hy, hz, 2, 2, 2)
    dx = dx.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, sx, sy, sz)
    return np.ascontiguousarray(dx)


_NUMPY = SimpleNamespace(
    name="numpy",
    conv3d_forward=_np_conv3d_forward,
    conv3d_backward=_np_conv3d_backward,
    maxpool3d_forward=_np_maxpool3d_forward,
    maxpool3d_backward=_np_maxpool3d_backward,
)


def _load_compiled():
    from gradcamo.engine import _ckernels

    return SimpleNamespace(
        name="compiled",
        conv3d_forward=_ckernels.conv3d_forward,
        conv3d_backward=_ckernels.conv3d_backward,
        maxpool3d_forward=_ckernels.maxpool3d_forward,
        maxpool3d_backward=_ckernels.maxpool3d_backward,
    )


def get_backend(name):
    """Return a specific backend namespace, for benchmarks and parity tests."""
    if name == "numpy":
        return _NUMPY
    if name == "compiled":
        return _load_compiled()
    raise ValidationError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["numpy"]
    try:
        _load_compiled()
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names


def _select():
    requested = os.environ.get("GRADCAMO_KERNELS", "auto").lower()
    if requested == "numpy":
        return _NUMPY
    if requested == "compiled":
        return _load_compiled()
    if requested != "auto":
        raise ValidationError(
            f"GRADCAMO_KERNELS must be auto, numpy or compiled, got {requested!r}"
        )
    try:
        return _load_compiled()
    except ImportError:
        return _NUMPY


_active = _select()
BACKEND = _active.name
conv3d_forward = _active.conv3d_forward
conv3d_backward = _active.conv3d_backward
maxpool3d_forward = _active.maxpool3d_forward
maxpool3d_backward = _active.maxpool3d_backward
