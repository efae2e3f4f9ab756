"""Primitive tensor ops with reverse-mode gradients.

Every function takes and returns :class:`Tensor`.  Shapes follow the standard
definitions of each op; incompatible inputs raise :class:`ShapeError` naming
the op and both shapes.  ``primitive_forward`` dispatches by op name for
callers that work with the op set generically.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, check_same_dtype, make_result, unbroadcast

__all__ = [
    "add", "sub", "mul", "neg", "log", "matmul", "conv2d", "avg_pool2d",
    "max_pool2d", "relu", "sigmoid", "softmax", "log_softmax", "layer_norm",
    "concat", "split", "reshape", "transpose", "upsample2d_bilinear",
    "sum_", "mean", "primitive_forward", "PRIMITIVE_OPS",
]


# -- elementwise -------------------------------------------------------------

def add(a, b):
    check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g, b.shape))

    return make_result(data, (a, b), backward)


def sub(a, b):
    check_same_dtype("sub", a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(-g, b.shape))

    return make_result(data, (a, b), backward)


def mul(a, b):
    check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(unbroadcast(g * a.data, b.shape))

    return make_result(data, (a, b), backward)


def neg(a):
    def backward(g):
        a.accumulate_grad(-g)

    return make_result(-a.data, (a,), backward)


def log(a):
    data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return make_result(data, (a,), backward)


def relu(a):
    data = np.maximum(a.data, 0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return make_result(data, (a,), backward)


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.accumulate_grad(g * data * (1.0 - data))

    return make_result(data, (a,), backward)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy-style batch broadcasting (ndim >= 2)."""
    check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(unbroadcast(gb, b.shape))

    return make_result(data, (a, b), backward)


# -- convolution and pooling (NHWC) -----------------------------------------

def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (n, ho, wo, c, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, kh * kw * c), (n, ho, wo)


def conv2d(x, kernel, stride=1, padding=0):
    """2-D convolution, NHWC input against a (kh, kw, c_in, c_out) kernel."""
    check_same_dtype("conv2d", x, kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: need NHWC and (kh,kw,ci,co), got {x.shape} and {kernel.shape}")
    kh, kw, ci, co = kernel.shape
    if x.shape[3] != ci:
        raise ShapeError(f"conv2d: input channels of {x.shape} do not match kernel {kernel.shape}")
    if x.shape[1] + 2 * padding < kh or x.shape[2] + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {kernel.shape}")
    needs_grad = x.requires_grad or kernel.requires_grad
    cols, (n, ho, wo) = _im2col(x.data, kh, kw, stride, padding)
    data = (cols @ kernel.data.reshape(kh * kw * ci, co)).reshape(n, ho, wo, co)
    if not needs_grad:
        cols = None

    def backward(g):
        g_mat = g.reshape(n * ho * wo, co)
        if kernel.requires_grad:
            kernel.accumulate_grad((cols.T @ g_mat).reshape(kernel.shape))
        if x.requires_grad:
            if stride == 1 and kh - 1 - padding >= 0:
                # transposed convolution: correlate g with the flipped kernel
                flipped = np.ascontiguousarray(
                    kernel.data[::-1, ::-1].transpose(0, 1, 3, 2))
                gcols, _ = _im2col(g, kh, kw, 1, kh - 1 - padding)
                dx = (gcols @ flipped.reshape(kh * kw * co, ci))
                x.accumulate_grad(dx.reshape(x.shape))
            else:
                dcols = (g_mat @ kernel.data.reshape(kh * kw * ci, co).T)
                dcols = dcols.reshape(n, ho, wo, kh, kw, ci)
                hp = x.shape[1] + 2 * padding
                wp = x.shape[2] + 2 * padding
                dxp = np.zeros((n, hp, wp, ci), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, :, :, i, j]
                if padding:
                    dxp = dxp[:, padding:-padding, padding:-padding]
                x.accumulate_grad(dxp)

    return make_result(data, (x, kernel), backward)


def _pool_windows(x, kh, kw, op_kind):
    if x.ndim != 4:
        raise ShapeError(f"{op_kind}: need NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"{op_kind}: input {x.shape} not divisible by window ({kh}, {kw})")
    return x.reshape(n, h // kh, kh, w // kw, kw, c)


def avg_pool2d(x, kernel):
    """Non-overlapping average pooling; ``kernel`` is an int or (kh, kw)."""
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    win = _pool_windows(x.data, kh, kw, "avg_pool2d")
    data = win.mean(axis=(2, 4))

    def backward(g):
        scale = np.asarray(1.0 / (kh * kw), dtype=x.dtype)
        gx = np.broadcast_to((g * scale)[:, :, None, :, None, :], win.shape)
        x.accumulate_grad(gx.reshape(x.shape))

    return make_result(data, (x,), backward)


def max_pool2d(x, kernel):
    """Non-overlapping max pooling; gradient goes to the first max per window."""
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    win = _pool_windows(x.data, kh, kw, "max_pool2d")
    n, ho, _, wo, _, c = win.shape
    flat = win.transpose(0, 1, 3, 2, 4, 5).reshape(n, ho, wo, kh * kw, c)
    arg = flat.argmax(axis=3)
    data = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gx = gflat.reshape(n, ho, wo, kh, kw, c).transpose(0, 1, 3, 2, 4, 5)
        x.accumulate_grad(gx.reshape(x.shape))

    return make_result(data, (x,), backward)


# -- normalization -----------------------------------------------------------

def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x.accumulate_grad((g - dot) * data)

    return make_result(data, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        p = np.exp(data)
        x.accumulate_grad(g - p * g.sum(axis=axis, keepdims=True))

    return make_result(data, (x,), backward)


def layer_norm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean / unit variance along ``axis`` (no affine part)."""
    mean_ = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean_
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    data = centered * inv_std

    def backward(g):
        m = x.shape[axis]
        g_mean = g.mean(axis=axis, keepdims=True)
        gy_mean = (g * data).mean(axis=axis, keepdims=True)
        del m
        x.accumulate_grad((g - g_mean - data * gy_mean) * inv_std)

    return make_result(data, (x,), backward)


# -- shape manipulation ------------------------------------------------------

def concat(tensors, axis=0):
    tensors = list(tensors)
    check_same_dtype("concat", *tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                t.accumulate_grad(g[tuple(idx)])
            offset += n

    return make_result(data, tuple(tensors), backward)


def split(x, sizes, axis=0):
    """Split into chunks of the given sizes along ``axis``; returns a list."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover {x.shape} along axis {axis}")
    outs = []
    offset = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(offset, offset + n)
        idx = tuple(idx)

        def backward(g, idx=idx):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            x.accumulate_grad(gx)

        outs.append(make_result(x.data[idx].copy(), (x,), backward))
        offset += n
    return outs


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    data = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    return make_result(data, (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def backward(g):
        x.accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


# -- resampling --------------------------------------------------------------

_UPSAMPLE_CACHE = {}


def _interp_matrix(n_in, factor, dtype):
    """Row-stochastic (n_in*factor, n_in) bilinear interpolation matrix."""
    key = (n_in, factor, np.dtype(dtype).str)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    for r in range(n_out):
        mat[r, i0[r]] += 1.0 - w1[r]
        mat[r, i1[r]] += w1[r]
    _UPSAMPLE_CACHE[key] = mat
    return mat


def upsample2d_bilinear(x, factor):
    """Bilinear upsampling of NHWC by integer ``factor`` (int or (fh, fw))."""
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    if x.ndim != 4:
        raise ShapeError(f"upsample2d_bilinear: need NHWC input, got {x.shape}")
    if fh < 1 or fw < 1:
        raise ShapeError(f"upsample2d_bilinear: factor ({fh}, {fw}) must be >= 1")
    uh = _interp_matrix(x.shape[1], fh, x.dtype)
    uw = _interp_matrix(x.shape[2], fw, x.dtype)

    def apply_pair(arr, mh, mw):
        y = np.tensordot(mh, arr, axes=([1], [1]))          # (Ho, n, w, c)
        y = np.tensordot(mw, y, axes=([1], [2]))            # (Wo, Ho, n, c)
        return np.ascontiguousarray(y.transpose(2, 1, 0, 3))

    data = apply_pair(x.data, uh, uw)

    def backward(g):
        x.accumulate_grad(apply_pair(g, uh.T, uw.T))

    return make_result(data, (x,), backward)


# -- reductions --------------------------------------------------------------

def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    axis = _normalize_axis(axis, x.ndim)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return make_result(data, (x,), backward)


def mean(x, axis=None, keepdims=False):
    axis = _normalize_axis(axis, x.ndim)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        scale = np.asarray(1.0 / count, dtype=x.dtype)
        x.accumulate_grad(np.broadcast_to(g * scale, x.shape).copy())

    return make_result(data, (x,), backward)


# -- generic dispatch --------------------------------------------------------

PRIMITIVE_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "avg_pool2d": avg_pool2d,
    "max_pool2d": max_pool2d,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "log": log,
    "concat": concat,
    "split": split,
    "reshape": reshape,
    "transpose": transpose,
    "upsample2d_bilinear": upsample2d_bilinear,
    "sigmoid": sigmoid,
    "sum": sum_,
    "mean": mean,
}


def primitive_forward(op_kind, inputs, attrs=None):
    """Apply a primitive by name to a sequence of input tensors."""
    if op_kind not in PRIMITIVE_OPS:
        raise ShapeError(f"unknown op_kind {op_kind!r}")
    fn = PRIMITIVE_OPS[op_kind]
    attrs = dict(attrs or {})
    if op_kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
