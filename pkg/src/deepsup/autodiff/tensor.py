"""Tensor, Parameter and the reverse-mode sweep."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested on something that was never produced by an op."""


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage dtype (float64 is used for gradient checks)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array plus the bookkeeping needed to backpropagate through it.

    ``parents`` and ``backward_fn`` are set only for op outputs. A tensor with
    ``requires_grad`` and no ``backward_fn`` is a leaf whose ``grad`` accumulates
    across backward calls.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=_DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


class Parameter:
    """Trainable tensor with its gradient and momentum buffer."""

    def __init__(self, value, name: str = ""):
        self.value = Tensor(value, requires_grad=True, name=name)
        self.value.grad = np.zeros_like(self.value.data)
        self.velocity = np.zeros_like(self.value.data)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr) -> None:
        arr = np.asarray(arr, dtype=self.value.data.dtype)
        if arr.shape != self.value.data.shape:
            raise ValueError(f"{self.name}: shape {arr.shape} != {self.value.data.shape}")
        self.value.data = arr

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.value
    return Tensor(x)


def _finite(a: np.ndarray) -> bool:
    # float64 accumulation cannot overflow for float32 inputs, so the sum is
    # finite exactly when every element is.
    return bool(np.isfinite(np.sum(a, dtype=np.float64)))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> Tensor:
    """Wrap an op result, refusing non-finite values."""
    if not _finite(data):
        raise NonFiniteError(f"non-finite value produced by op {name!r}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        parents=tuple(parents) if needs else (),
        backward_fn=backward_fn if needs else None,
        name=name,
    )


def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.backward_fn is None:
        raise GraphError("backward() called on a tensor that has no recorded forward op")
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if not _finite(pg):
                raise NonFiniteError(f"non-finite gradient flowing out of op {node.name!r}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
