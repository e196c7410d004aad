"""Central finite-difference checks against backward()."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ValueError(f"function must return a scalar, got shape {t.shape}")
    return float(t.data.reshape(()))


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    grad = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    return grad


def numeric_grad(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float,
    indices: Iterable[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences at the flat ``indices`` (all coordinates by default).

    ``x.data`` is perturbed in place and restored afterwards.
    """
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    out = np.empty(idx.size, dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(flat[i])
            fp = _scalar(f(x))
            flat[i] = orig - h
            down = float(flat[i])
            fm = _scalar(f(x))
            flat[i] = orig
            # the stored step differs from 2h once rounded to the tensor dtype
            out[k] = (fp - fm) / (up - down)
    return idx, out


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    ``f`` must map ``x`` to a scalar Tensor. ``indices`` restricts the check to
    a subset of flat coordinates, which keeps large parameter tensors cheap.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    a = analytic_grad(f, x).reshape(-1)
    idx, b = numeric_grad(f, x, h, indices)
    if idx.size == 0:
        return 0.0
    return float(relative_error(a[idx], b).max())


def reference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    f_ref: Callable[[Tensor], Tensor],
    x_ref: Tensor,
    h: float = 1e-6,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error of backward() through ``f`` against central differences of ``f_ref``.

    Meant for 32-bit graphs: ``f_ref``/``x_ref`` are the same computation at
    64-bit, so the reference is not swamped by single-precision rounding.
    """
    if x.shape != x_ref.shape:
        raise ValueError(f"x has shape {x.shape} but x_ref has shape {x_ref.shape}")
    a = analytic_grad(f, x).reshape(-1)
    idx, b = numeric_grad(f_ref, x_ref, h, indices)
    if idx.size == 0:
        return 0.0
    return float(relative_error(a[idx], b).max())
