"""Differentiable primitives.

Each function takes Tensors, computes its result with numpy and records a
backward closure on the output. No broadcasting is done beyond the
per-channel bias of ``conv2d``/``batchnorm2d`` and the per-feature bias of
``affine``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, attach

PROB_FLOOR = 1e-12


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------------------- conv


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel of weight {weight.shape} exceeds padded input {x.shape} (padding={padding})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    def grad_fn(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return attach(out, "conv2d", inputs, grad_fn, stride=stride, padding=padding, cols=cols)


# ---------------------------------------------------------------------- batchnorm


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics over (B, H, W) are used and the
    running buffers are updated in place (the variance buffer receives the
    unbiased estimate). In eval mode only the running buffers are read.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d: {label} {arr.shape} does not match input {x.shape}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    gshape = (1, c, 1, 1)

    if training:
        if n == 1:
            raise ShapeError(f"batchnorm2d: variance undefined for one value per channel (input {x.shape})")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(gshape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(gshape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(gshape)) * inv_std.reshape(gshape)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def grad_fn(g: np.ndarray):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(gshape)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(gshape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(gshape)
                gx = (inv_std.reshape(gshape) / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(gshape)
        return gx, gg, gb

    return attach(out, "batchnorm2d", (x, gamma, beta), grad_fn, training=training, xhat=xhat, inv_std=inv_std)


# ---------------------------------------------------------------- pointwise/pool


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return attach(out, "relu", (x,), lambda g: (g * mask,), mask=mask)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return attach(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return attach(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, k: float) -> Tensor:
    return attach(x.data * x.dtype.type(k), "scale", (x,), lambda g: (g * x.dtype.type(k),), k=k)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return attach(out, "sum", (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return attach(out, "mean", (x,), lambda g: (np.full(x.shape, g / x.size, dtype=x.dtype),))


def square_sum(x: Tensor) -> Tensor:
    """Sum of squared entries (the squared Frobenius norm for a matrix)."""
    out = np.asarray((x.data * x.data).sum(), dtype=x.dtype)
    return attach(out, "square_sum", (x,), lambda g: (2 * g * x.data,))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return attach(out, "flatten", (x,), lambda g: (g.reshape(shape),), shape=shape)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g: np.ndarray):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return attach(out, "affine", inputs, grad_fn)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window maximum; padded cells never win. Ties route gradient to the first maximum."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-d input, got {x.shape}")
    if stride < 1 or kernel < 1:
        raise ValueError("maxpool2d: kernel and stride must be positive")
    b, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ShapeError(f"maxpool2d: window {kernel}x{kernel} exceeds input {x.shape} (padding={padding})")
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def grad_fn(g: np.ndarray):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (argmax == k)
        return (dxp[:, :, padding : padding + h, padding : padding + w],)

    return attach(np.ascontiguousarray(out), "maxpool2d", (x,), grad_fn, argmax=argmax)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return attach(out, "global_avg_pool", (x,), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last (class) axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return attach(s, "softmax", (x,), grad_fn)


def cross_entropy(q: Tensor, p) -> Tensor:
    """Batch mean of ``-sum_i p_i log(max(q_i, 1e-12))``.

    ``q`` holds predicted class probabilities (B, K); ``p`` the target
    distribution of the same shape. Targets are treated as constants.
    """
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    if q.ndim != 2 or p.shape != q.shape:
        raise ShapeError(f"cross_entropy: predictions {q.shape} and targets {p.shape} differ")
    p = p.astype(q.dtype)
    clamped = np.maximum(q.data, q.dtype.type(PROB_FLOOR))
    batch = q.shape[0]
    out = np.asarray(-(p * np.log(clamped)).sum(axis=1).mean(), dtype=q.dtype)

    def grad_fn(g: np.ndarray):
        return (-g * p / clamped * (q.data > PROB_FLOOR) / batch,)

    return attach(out, "cross_entropy", (q,), grad_fn)
