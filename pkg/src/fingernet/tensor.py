"""Dense float tensors with a reverse-mode differentiation graph.

Every differentiable primitive lives in :mod:`fingernet.functional`; this
module only holds the container, the graph node record and the backward
traversal.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class GraphNode:
    """Record of one primitive application.

    ``backward`` maps the upstream gradient to one gradient per input (``None``
    for inputs that do not need one). It only reads ``saved``, which is filled
    at forward time.
    """

    op_kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict[str, Any] = field(default_factory=dict)


class Tensor:
    """An n-dimensional float array that can take part in autodiff.

    Leaves (``node is None``) with ``requires_grad=True`` accumulate gradients
    into ``grad`` on :meth:`backward`. Intermediate results never keep theirs.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _SUPPORTED_DTYPES else DEFAULT_DTYPE
        dtype = np.dtype(dtype)
        if dtype not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype}")
        arr = np.asarray(data, dtype=dtype, order="C")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: GraphNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # thin operator sugar; the primitives themselves live in functional
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import functional as F

        return F.add(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        from . import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import functional as F

        return F.sum(self)

    def backward(self) -> None:
        backward(self)


def attach(out: np.ndarray, op_kind: str, inputs: Sequence[Tensor], grad_fn, **saved: Any) -> Tensor:
    """Wrap ``out`` in a Tensor and link it into the graph if any input needs grad."""
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = GraphNode(op_kind, tuple(inputs), grad_fn, saved)
    return t


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    The graph is kept, so calling this twice adds the gradient twice.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
