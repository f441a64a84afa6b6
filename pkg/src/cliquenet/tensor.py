"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the operations applied to them. A
backward pass walks the recorded graph in reverse topological order and
accumulates gradients, so a parameter used at several graph positions
receives the sum of its positional gradients. Graphs are recorded eagerly
per forward pass and are single-use: one forward recording, one backward
sweep.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from .errors import UsageError

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def default_dtype() -> np.dtype:
    """Scalar kind used for newly created leaf tensors."""
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    """Select the leaf scalar kind: float32 for training, float64 for gradient checking."""
    dt = np.dtype(dtype)
    if dt.type not in _FLOAT_DTYPES:
        raise UsageError(f"unsupported scalar kind {dt}; use float32 or float64")
    global _default_dtype
    _default_dtype = dt.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default scalar kind."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``grad`` is populated by :func:`backward` and always matches ``data`` in
    shape. Operation outputs keep the dtype of their inputs; leaves created
    from plain Python data use the module default dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            if data.dtype.type not in _FLOAT_DTYPES:
                data = data.astype(_default_dtype)
        else:
            data = np.asarray(data, dtype=dtype or _default_dtype)
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on.

        Positional gradients of a tensor reached through several paths are
        summed. Raises :class:`UsageError` when called on a non-scalar.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = collect_graph(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def collect_graph(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def accumulate_grad(tensor: Tensor, delta: np.ndarray) -> None:
    """Add a positional gradient contribution to ``tensor.grad``."""
    if not (tensor.requires_grad or tensor._parents):
        return
    if tensor.grad is None:
        tensor.grad = np.array(delta, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += delta


def make_node(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result, recording parents only when gradients can flow."""
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


class Parameter(Tensor):
    """Named trainable tensor, unique within a model registry.

    ``role`` tags what initializer applies: conv kernels draw He normal,
    dense weights Xavier uniform, scale/shift pairs start at one/zero.
    """

    __slots__ = ("name", "role")

    ROLES = ("conv", "dense_weight", "dense_bias", "bn_gamma", "bn_beta")

    def __init__(self, name: str, data, role: str, dtype=None):
        if role not in self.ROLES:
            raise UsageError(f"unknown parameter role {role!r}")
        # leaves always resolve a concrete scalar kind, module default if unset
        super().__init__(data, requires_grad=True, dtype=dtype or _default_dtype)
        self.name = name
        self.role = role

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, role={self.role!r})"
