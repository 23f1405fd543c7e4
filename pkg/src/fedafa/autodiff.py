"""Small reverse-mode differentiation engine over dense numpy arrays.

A :class:`Graph` records every primitive applied to tensors that belong to it.
Calling :func:`backward` on a scalar loss walks the record in reverse and
returns a :class:`Gradients` mapping. One graph serves exactly one
forward/backward pair.

Ops also accept tensors without a graph (or plain arrays); they then just
compute values, which is how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class GraphError(RuntimeError):
    """Misuse of a computation graph (reuse, foreign tensors, non-scalar loss)."""


class Tensor:
    __slots__ = ("value", "graph", "node_id", "requires_grad")

    def __init__(self, value, graph: Optional["Graph"] = None, node_id: Optional[int] = None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    parents: tuple[Optional[int], ...]
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple[int, ...]
    requires_grad: bool


class Graph:
    """Ordered record of primitives; the recording order is a topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def tensor(self, value, requires_grad: bool = False) -> Tensor:
        """Register a leaf (parameter or marked input)."""
        self._check_open()
        value = np.asarray(value, dtype=DTYPE)
        node_id = len(self._nodes)
        self._nodes.append(_Node((), None, value.shape, requires_grad))
        return Tensor(value, self, node_id, requires_grad)

    def _record(self, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        self._check_open()
        requires_grad = any(t.requires_grad for t in inputs)
        node_id = len(self._nodes)
        parents = tuple(t.node_id if t.graph is self else None for t in inputs)
        self._nodes.append(_Node(parents, backward_fn if requires_grad else None,
                                 value.shape, requires_grad))
        return Tensor(value, self, node_id, requires_grad)

    def _check_open(self) -> None:
        if self._consumed:
            raise GraphError("graph already differentiated; run a new forward pass on a fresh Graph")


class Gradients:
    """Gradients of one loss, indexed by the tensors of its graph."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.graph is not self._graph or t.node_id is None:
            raise GraphError(f"{t!r} is not part of the differentiated graph")
        g = self._grads.get(t.node_id)
        if g is None:
            return np.zeros(t.shape, dtype=DTYPE)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.graph is self._graph and t.node_id in self._grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(*ts: Tensor) -> Optional[Graph]:
    graph = None
    for t in ts:
        if t.graph is None:
            continue
        if graph is None:
            graph = t.graph
        elif t.graph is not graph:
            raise GraphError("operands belong to different graphs")
    return graph


def _emit(value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    graph = _graph_of(*inputs)
    if graph is None:
        return Tensor(value)
    return graph._record(value, inputs, backward_fn)


# -- primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(a, b) -> Tensor:
    """Add a bias row vector ``b`` (m,) to every row of ``a`` (n, m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ValueError(f"add_bias shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (values only, no graph)."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, num_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def softmax_cross_entropy(logits, one_hot_labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against one-hot targets.

    Softmax and log are fused (log-sum-exp) so a vanishing probability never
    hits ``log(0)``.
    """
    logits = _as_tensor(logits)
    y = np.asarray(one_hot_labels.value if isinstance(one_hot_labels, Tensor) else one_hot_labels,
                   dtype=DTYPE)
    if y.ndim == 1:
        y = y[None, :]
    z = logits.value
    if z.ndim == 1:
        raise ValueError(f"softmax_cross_entropy expects (n, C) logits, got {z.shape}")
    if z.shape != y.shape:
        raise ValueError(f"softmax_cross_entropy shape mismatch: logits {z.shape} vs labels {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot: exactly one entry equal to 1 per row")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = -(y * log_p).sum() / n
    p = np.exp(log_p)
    return _emit(np.asarray(loss), (logits,), lambda g: (g * (p - y) / n,))


# -- reverse pass -------------------------------------------------------------

def backward(loss: Tensor) -> Gradients:
    """Gradients of a scalar ``loss`` w.r.t. every node of its graph.

    Consumes the graph: a second call (or further ops) raises GraphError.
    """
    graph = loss.graph
    if graph is None or loss.node_id is None:
        raise GraphError("loss was not produced on a Graph")
    if graph._consumed:
        raise GraphError("backward already called on this graph")
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph._consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=DTYPE)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = graph._nodes[node_id]
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent is None or pg is None or not graph._nodes[parent].requires_grad:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return Gradients(graph, grads)


def input_gradient(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """d loss / d wrt, for a tensor marked differentiable before the forward pass."""
    if wrt.graph is None or wrt.graph is not loss.graph:
        raise GraphError("wrt is not part of the loss's graph")
    if not wrt.requires_grad:
        raise GraphError("wrt was not marked requires_grad before the forward pass")
    return backward(loss)[wrt]
