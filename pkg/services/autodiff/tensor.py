"""Tensors and the recording tape for reverse-mode differentiation.

Ops record themselves into the Graph that is active on the current thread
(``with Graph() as g:``). Nothing is recorded when no graph is active, so plain
inference runs without bookkeeping. Independent graphs on separate threads do
not share state.
"""
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import GraphError, ShapeError

_local = threading.local()


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """Topologically ordered record of one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._produced: Dict[int, Node] = {}

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        node = Node(op, tuple(inputs), output, backward_fn)
        self.nodes.append(node)
        self._produced[id(output)] = node

    def produced(self, tensor: Tensor) -> bool:
        node = self._produced.get(id(tensor))
        return node is not None and node.output is tensor

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Optional[Graph]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward_from(graph: Graph, output: Tensor, upstream) -> None:
    """Propagate an arbitrary upstream gradient for ``output`` back through ``graph``.

    Leaf tensors accumulate into ``.grad``; intermediate tensors get their
    gradient assigned, which is what class-activation maps read.
    """
    if graph is None or not graph.produced(output):
        raise GraphError("backward called before forward: the tensor was not produced by this graph")
    seed = np.asarray(upstream, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"upstream gradient shape {seed.shape} != output shape {output.shape}")

    pending: Dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node.output), None)
        if grad is None:
            continue
        node.output.grad = grad
        for tensor, g in zip(node.inputs, node.backward(grad)):
            if g is None or not tensor.requires_grad:
                continue
            if graph.produced(tensor):
                key = id(tensor)
                pending[key] = pending[key] + g if key in pending else g
            else:
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def backward(graph: Graph, loss: Tensor) -> None:
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    backward_from(graph, loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad ** 2))
    return float(np.sqrt(total))
