"""Differentiable ops over tape tensors.

Every op accepts a mix of ``Tensor`` and plain ndarray arguments (at least
one Tensor), records one node on the common tape, and returns a Tensor.
Plain arrays are treated as constants: no gradient is computed for them, so
feeding an input volume as a raw array keeps the first convolution from
doing its (expensive, useless) input-gradient pass.

Volumetric ops accept a single sample (channel-first, e.g. ``(C, X, Y, Z)``)
or a batch with one extra leading axis; the output keeps the input's rank.
Backward closures never mutate the upstream gradient and always return
freshly allocated arrays.
"""

from functools import lru_cache

import numpy as np

from gradcamo.engine import kernels
from gradcamo.engine.tape import Tensor
from gradcamo.errors import ValidationError

__all__ = [
    "add",
    "channel_combine",
    "conv3d",
    "gather_sum",
    "global_avg_pool",
    "linear",
    "maxpool3d",
    "mean_all",
    "overlap_ratio",
    "relu",
    "resize_volume",
    "scale",
    "softmax_cross_entropy",
    "trilinear_resize",
    "weighted_sum",
]

_FLOATS = (np.float32, np.float64)


def _data(v):
    return v.data if isinstance(v, Tensor) else v


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValidationError("arguments live on different tapes")
    if tape is None:
        raise ValidationError("at least one argument must be a tape Tensor")
    return tape


def _check_float(name, arr):
    if arr.dtype not in _FLOATS:
        raise ValidationError(f"{name} must be float32 or float64, got {arr.dtype}")


def _check_same_dtype(*pairs):
    dtypes = {arr.dtype for _, arr in pairs}
    if len(dtypes) > 1:
        detail = ", ".join(f"{n}={a.dtype}" for n, a in pairs)
        raise ValidationError(f"mixed dtypes in one op: {detail}")


def _const(v):
    arr = np.ascontiguousarray(np.asarray(v))
    return arr


def _grad_for(parents, named):
    # Align computed gradients (keyed by argument identity) with the
    # recorded parent tuple.
    return tuple(named[id(p)] for p in parents)


def conv3d(x, w, b):
    """3x3x3 convolution (correlation), stride 1, zero padding 1."""
    tape = _tape_of(x, w, b)
    xd, wd, bd = _const(_data(x)), _const(_data(w)), _const(_data(b))
    _check_float("conv3d input", xd)
    _check_same_dtype(("input", xd), ("weight", wd), ("bias", bd))
    if xd.ndim not in (4, 5):
        raise ValidationError(
            f"conv3d expects (C, X, Y, Z) or (N, C, X, Y, Z), got shape {xd.shape}")
    single = xd.ndim == 4
    xb = xd[None] if single else xd
    if wd.ndim != 5 or wd.shape[2:] != (3, 3, 3):
        raise ValidationError(f"conv3d weight must be (Co, Ci, 3, 3, 3), got {wd.shape}")
    if wd.shape[1] != xb.shape[1]:
        raise ValidationError(
            f"conv3d channel mismatch: input has {xb.shape[1]}, weight expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ValidationError(f"conv3d bias must be ({wd.shape[0]},), got {bd.shape}")

    y = kernels.conv3d_forward(xb, wd, bd)
    out = y[0] if single else y
    parents = tuple(a for a in (x, w, b) if isinstance(a, Tensor))
    need_dx = isinstance(x, Tensor)

    def bwd(gout):
        g = np.ascontiguousarray(gout[None] if single else gout)
        dx, dw, db = kernels.conv3d_backward(xb, wd, g, need_dx=need_dx)
        if dx is not None and single:
            dx = dx[0]
        return _grad_for(parents, {id(x): dx, id(w): dw, id(b): db})

    return tape._record(out, "conv3d", parents, bwd)


def relu(x):
    """Elementwise max(x, 0); the subgradient at 0 is 0."""
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("relu input", xd)
    y = np.maximum(xd, 0)

    def bwd(gout):
        return (gout * (xd > 0),)

    return tape._record(y, "relu", (x,), bwd)


def maxpool3d(x):
    """2x2x2 max pooling with stride 2 over the trailing three axes."""
    tape = _tape_of(x)
    xd = _const(_data(x))
    _check_float("maxpool3d input", xd)
    if xd.ndim not in (4, 5):
        raise ValidationError(
            f"maxpool3d expects (C, X, Y, Z) or (N, C, X, Y, Z), got shape {xd.shape}")
    single = xd.ndim == 4
    xb = xd[None] if single else xd
    spatial = xb.shape[2:]
    if any(s % 2 for s in spatial):
        raise ValidationError(
            f"maxpool3d needs even spatial extents, got {tuple(spatial)}")
    y, arg = kernels.maxpool3d_forward(xb)
    out = y[0] if single else y

    def bwd(gout):
        g = np.ascontiguousarray(gout[None] if single else gout)
        dx = kernels.maxpool3d_backward(arg, g, spatial)
        return (dx[0] if single else dx,)

    return tape._record(out, "maxpool3d", (x,), bwd)


def global_avg_pool(x):
    """Mean over the trailing three spatial axes; keeps channel (and batch)."""
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("global_avg_pool input", xd)
    if xd.ndim not in (4, 5):
        raise ValidationError(
            f"global_avg_pool expects 4D or 5D input, got shape {xd.shape}")
    vox = xd.shape[-3] * xd.shape[-2] * xd.shape[-1]
    y = xd.mean(axis=(-3, -2, -1))

    def bwd(gout):
        # broadcast_to yields a read-only view; materialize a writable buffer
        da = np.empty_like(xd)
        da[...] = gout[..., None, None, None] / np.asarray(vox, dtype=xd.dtype)
        return (da,)

    return tape._record(y, "global_avg_pool", (x,), bwd)


def linear(x, w, b):
    """Affine map ``x @ w.T + b`` for ``x`` of shape ``(d,)`` or ``(N, d)``."""
    tape = _tape_of(x, w, b)
    xd, wd, bd = _data(x), _const(_data(w)), _const(_data(b))
    _check_float("linear input", xd)
    _check_same_dtype(("input", xd), ("weight", wd), ("bias", bd))
    if xd.ndim not in (1, 2) or wd.ndim != 2:
        raise ValidationError(
            f"linear expects x (d,) or (N, d) and w (K, d), got {xd.shape} and {wd.shape}")
    if xd.shape[-1] != wd.shape[1]:
        raise ValidationError(
            f"linear width mismatch: x has {xd.shape[-1]}, w expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ValidationError(f"linear bias must be ({wd.shape[0]},), got {bd.shape}")
    y = xd @ wd.T + bd
    parents = tuple(a for a in (x, w, b) if isinstance(a, Tensor))

    def bwd(gout):
        dx = gout @ wd
        if xd.ndim == 1:
            dw = np.multiply.outer(gout, xd)
            db = gout.copy()
        else:
            dw = gout.T @ xd
            db = gout.sum(axis=0)
        return _grad_for(parents, {id(x): dx, id(w): dw, id(b): db})

    return tape._record(y, "linear", parents, bwd)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy between softmax(logits) and integer labels.

    ``logits`` is ``(K,)`` with a scalar label or ``(N, K)`` with ``(N,)``
    labels. The max is subtracted before exponentiation so large logits stay
    finite. Returns a scalar tensor.
    """
    tape = _tape_of(logits)
    ld = _data(logits)
    _check_float("logits", ld)
    if ld.ndim not in (1, 2):
        raise ValidationError(f"logits must be (K,) or (N, K), got shape {ld.shape}")
    single = ld.ndim == 1
    l2 = ld[None] if single else ld
    lab = np.asarray(labels)
    if single:
        if lab.shape != ():
            raise ValidationError("a (K,) logit vector takes one integer label")
        lab = lab[None]
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {lab.dtype}")
    n, k = l2.shape
    if lab.shape != (n,):
        raise ValidationError(f"expected {n} labels, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValidationError(
            f"labels must lie in [0, {k}), got range [{lab.min()}, {lab.max()}]")

    m = l2.max(axis=1, keepdims=True)
    z = l2 - m
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    p = ez / se
    rows = np.arange(n)
    loglik = z[rows, lab] - np.log(se[:, 0])
    loss = np.asarray(-loglik.mean(), dtype=ld.dtype)

    def bwd(gout):
        g = p.copy()
        g[rows, lab] -= 1
        g *= gout / np.asarray(n, dtype=ld.dtype)
        return (g[0] if single else g,)

    return tape._record(loss, "softmax_cross_entropy", (logits,), bwd)


@lru_cache(maxsize=256)
def _axis_interp(src, dst):
    """Index pairs and fractional weights mapping a source axis onto dst bins.

    Sample o of the output reads source coordinate (o + 0.5) * src/dst - 0.5,
    clamped to the valid range, so resampling is symmetric about the volume
    center and edges clamp to the border voxel.
    """
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    if src == 1:
        i0 = np.zeros(dst, dtype=np.intp)
        t = np.zeros(dst, dtype=np.float64)
        return i0, i0, t
    i0 = np.minimum(coords.astype(np.intp), src - 2)
    t = coords - i0
    return i0, i0 + 1, t


def _apply_axis_matrix(arr, mat, ax):
    # out[..., o, ...] = sum_s mat[o, s] * arr[..., s, ...] along axis ax
    moved = np.moveaxis(arr, ax, -1)
    out = moved @ mat.T
    return np.ascontiguousarray(np.moveaxis(out, -1, ax))


def _resize_forward(vol, target):
    out = vol
    for ax_off, dst in enumerate(target):
        ax = out.ndim - 3 + ax_off
        src = out.shape[ax]
        if src == dst:
            continue
        i0, i1, t = _axis_interp(src, dst)
        x0 = np.take(out, i0, axis=ax)
        x1 = np.take(out, i1, axis=ax)
        shape = [1] * out.ndim
        shape[ax] = dst
        tb = t.reshape(shape).astype(vol.dtype)
        # x0 + t * (x1 - x0) keeps constant fields bitwise intact.
        out = x0 + tb * (x1 - x0)
    return np.ascontiguousarray(out)


def _resize_backward(gout, source, dtype):
    g = gout
    for ax_off in reversed(range(3)):
        ax = g.ndim - 3 + ax_off
        src = source[ax_off]
        dst = g.shape[ax]
        if src == dst:
            continue
        i0, i1, t = _axis_interp(src, dst)
        mat = np.zeros((dst, src), dtype=np.float64)
        np.add.at(mat, (np.arange(dst), i0), 1.0 - t)
        np.add.at(mat, (np.arange(dst), i1), t)
        g = _apply_axis_matrix(g, mat.T.astype(dtype), ax)
    return g


def resize_volume(vol, target):
    """Trilinear resample of the trailing three axes to ``target`` extents.

    Plain-array counterpart of ``trilinear_resize`` (same sampling grid),
    usable outside any tape. An identity target returns an exact copy.
    """
    vol = np.asarray(vol)
    if vol.ndim < 3:
        raise ValidationError(f"need at least 3 axes to resize, got shape {vol.shape}")
    if vol.dtype not in _FLOATS:
        raise ValidationError(
            f"resize_volume needs float input (cast masks first), got {vol.dtype}")
    target = tuple(int(s) for s in target)
    if len(target) != 3 or any(s < 1 for s in target):
        raise ValidationError(f"target extents must be three positive ints, got {target}")
    if tuple(vol.shape[-3:]) == target:
        return vol.copy()
    return _resize_forward(vol, target)


def trilinear_resize(x, target):
    """Differentiable trilinear resize of the trailing three axes."""
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("trilinear_resize input", xd)
    if xd.ndim not in (4, 5):
        raise ValidationError(
            f"trilinear_resize expects 4D or 5D input, got shape {xd.shape}")
    target = tuple(int(s) for s in target)
    if len(target) != 3 or any(s < 1 for s in target):
        raise ValidationError(f"target extents must be three positive ints, got {target}")
    source = tuple(xd.shape[-3:])
    y = xd.copy() if source == target else _resize_forward(xd, target)

    def bwd(gout):
        if source == target:
            return (gout.copy(),)
        return (_resize_backward(gout, source, xd.dtype),)

    return tape._record(y, "trilinear_resize", (x,), bwd)


def channel_combine(a, weights):
    """Per-channel weighted mean of feature maps: ``(1/C) * sum_c w_c A_c``.

    ``weights`` is a constant array, ``(C,)`` for a single map stack or
    ``(N, C)`` for a batch. Gradients flow into ``a`` only.
    """
    tape = _tape_of(a)
    ad = _data(a)
    wd = _const(weights)
    _check_float("channel_combine input", ad)
    _check_same_dtype(("maps", ad), ("weights", wd))
    if ad.ndim == 4:
        if wd.shape != (ad.shape[0],):
            raise ValidationError(
                f"weights must be ({ad.shape[0]},) for input {ad.shape}, got {wd.shape}")
        c = ad.shape[0]
        y = np.tensordot(wd, ad, axes=(0, 0)) / np.asarray(c, dtype=ad.dtype)
    elif ad.ndim == 5:
        if wd.shape != ad.shape[:2]:
            raise ValidationError(
                f"weights must be {ad.shape[:2]} for input {ad.shape}, got {wd.shape}")
        c = ad.shape[1]
        y = np.einsum("nc,nchwd->nhwd", wd, ad) / np.asarray(c, dtype=ad.dtype)
    else:
        raise ValidationError(
            f"channel_combine expects 4D or 5D input, got shape {ad.shape}")

    def bwd(gout):
        inv_c = np.asarray(1.0 / c, dtype=ad.dtype)
        if ad.ndim == 4:
            da = wd[:, None, None, None] * gout[None] * inv_c
        else:
            da = np.einsum("nc,nhwd->nchwd", wd, gout) * inv_c
        return (np.ascontiguousarray(da),)

    return tape._record(np.ascontiguousarray(y), "channel_combine", (a,), bwd)


def overlap_ratio(g, m, delta=1e-8):
    """Fraction of total map mass inside a mask, with a floored denominator.

    ``sum(g * m) / max(sum(g), delta)`` per sample. Input ``(H, W, D)`` gives
    a scalar; ``(N, H, W, D)`` gives a length-N vector. ``m`` is a constant
    array of the same shape with entries in {0, 1}.
    """
    tape = _tape_of(g)
    gd = _data(g)
    md = _const(m)
    _check_float("overlap_ratio map", gd)
    if gd.ndim not in (3, 4):
        raise ValidationError(
            f"overlap_ratio expects (H, W, D) or (N, H, W, D), got shape {gd.shape}")
    if md.shape != gd.shape:
        raise ValidationError(
            f"mask shape {md.shape} does not match map shape {gd.shape}")
    if not (((md == 0) | (md == 1)).all()):
        raise ValidationError("overlap mask must contain only 0 and 1")
    delta = float(delta)
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    md = md.astype(gd.dtype)
    axes = tuple(range(gd.ndim - 3, gd.ndim))
    num = (gd * md).sum(axis=axes)
    den = gd.sum(axis=axes)
    den_f = np.maximum(den, delta)
    y = np.asarray(num / den_f, dtype=gd.dtype)

    def bwd(gout):
        live = (den > delta).astype(gd.dtype)
        coef_m = gout / den_f
        coef_g = gout * live * num / (den_f * den_f)
        expand = (...,) + (None,) * 3
        dg = md * coef_m[expand] - coef_g[expand]
        return (np.ascontiguousarray(dg.astype(gd.dtype)),)

    return tape._record(y, "overlap_ratio", (g,), bwd)


def gather_sum(x, index):
    """Sum of one selected entry per row: ``sum_i x[i, index[i]]``.

    A ``(K,)`` vector with a scalar index returns that entry; an ``(N, K)``
    matrix with ``(N,)`` indices returns the sum of the selected logits,
    whose gradient is one independent one-hot row per sample.
    """
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("gather_sum input", xd)
    if xd.ndim not in (1, 2):
        raise ValidationError(f"gather_sum expects (K,) or (N, K), got shape {xd.shape}")
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError(f"indices must be integers, got dtype {idx.dtype}")
    single = xd.ndim == 1
    x2 = xd[None] if single else xd
    if single:
        if idx.shape != ():
            raise ValidationError("a (K,) vector takes one scalar index")
        idx = idx[None]
    n, k = x2.shape
    if idx.shape != (n,):
        raise ValidationError(f"expected {n} indices, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise ValidationError(
            f"indices must lie in [0, {k}), got range [{idx.min()}, {idx.max()}]")
    rows = np.arange(n)
    y = np.asarray(x2[rows, idx].sum(), dtype=xd.dtype)

    def bwd(gout):
        g = np.zeros_like(x2)
        g[rows, idx] = gout
        return (g[0] if single else g,)

    return tape._record(y, "gather_sum", (x,), bwd)


def add(a, b):
    """Elementwise sum of two same-shape tensors (either may be constant)."""
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    _check_float("add lhs", ad)
    _check_same_dtype(("lhs", ad), ("rhs", bd))
    if ad.shape != bd.shape:
        raise ValidationError(f"add shape mismatch: {ad.shape} vs {bd.shape}")
    parents = tuple(v for v in (a, b) if isinstance(v, Tensor))

    def bwd(gout):
        ga = gout.copy() if isinstance(a, Tensor) else None
        gb = gout.copy() if isinstance(b, Tensor) else None
        return _grad_for(parents, {id(a): ga, id(b): gb})

    return tape._record(ad + bd, "add", parents, bwd)


def scale(x, c):
    """Multiply by a python scalar constant."""
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("scale input", xd)
    cv = np.asarray(c, dtype=xd.dtype)
    if cv.shape != ():
        raise ValidationError(f"scale factor must be a scalar, got shape {cv.shape}")

    def bwd(gout):
        return (gout * cv,)

    return tape._record(xd * cv, "scale", (x,), bwd)


def weighted_sum(x, weights):
    """Scalar ``sum(x * weights)`` against a constant weight array."""
    tape = _tape_of(x)
    xd = _data(x)
    wd = _const(weights)
    _check_float("weighted_sum input", xd)
    _check_same_dtype(("input", xd), ("weights", wd))
    if wd.shape != xd.shape:
        raise ValidationError(
            f"weights shape {wd.shape} does not match input shape {xd.shape}")
    y = np.asarray((xd * wd).sum(), dtype=xd.dtype)

    def bwd(gout):
        return (gout * wd,)

    return tape._record(y, "weighted_sum", (x,), bwd)


def mean_all(x):
    """Mean over every element, as a scalar tensor."""
    tape = _tape_of(x)
    xd = _data(x)
    _check_float("mean_all input", xd)
    if xd.size == 0:
        raise ValidationError("mean_all of an empty tensor")
    y = np.asarray(xd.mean(), dtype=xd.dtype)

    def bwd(gout):
        return (np.full(xd.shape, gout / np.asarray(xd.size, dtype=xd.dtype),
                        dtype=xd.dtype),)

    return tape._record(y, "mean_all", (x,), bwd)
