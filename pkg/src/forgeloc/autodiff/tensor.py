"""Tensor and tape-based reverse-mode differentiation graph."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a call violates an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """Raised in finite-checking mode when an op produces NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("tag", "inputs", "backward")

    def __init__(self, tag: str, inputs: tuple, backward: Optional[BackwardFn]):
        self.tag = tag
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Graph` node.

    Tensors without a graph are constants: operations on them are evaluated
    eagerly and nothing is recorded.
    """

    __slots__ = ("data", "graph", "node")
    __array_priority__ = 100

    def __init__(self, data, graph: Optional["Graph"] = None, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # operator sugar; the functions live in ops to keep one code path
    def __add__(self, other):
        from . import ops
        return ops.add(self, _wrap(other))

    def __radd__(self, other):
        from . import ops
        return ops.add(_wrap(other), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _wrap(other))

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Append-only tape of differentiable operations.

    Nodes are appended as operations execute, so the node order is already a
    topological order and :meth:`backward` simply walks it in reverse.

    Args:
        check_finite: when true, every recorded op verifies that its output
            is finite and raises :class:`NonFiniteError` naming the op.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self._leaf_data: dict[int, np.ndarray] = {}
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str, value) -> Tensor:
        """Register a named parameter leaf and return it as a tensor."""
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already registered")
        data = np.asarray(value, dtype=np.float64)
        idx = self._append("leaf:" + name, (), None, data)
        self.leaves[name] = idx
        self._leaf_data[idx] = data
        return Tensor(data, self, idx)

    def leaves_from(self, params: dict, prefix: str = "") -> dict:
        """Register every array in ``params`` as a leaf; returns name -> Tensor."""
        return {name: self.leaf(name, value) for name, value in params.items()
                if name.startswith(prefix)}

    def _append(self, tag, inputs, backward, out: np.ndarray) -> int:
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(
                f"non-finite values produced by op {tag!r} at node {len(self.nodes)}")
        self.nodes.append(_Node(tag, inputs, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> dict:
        """Reverse-mode sweep from a scalar ``loss``.

        Returns a map from every registered leaf name to its gradient; leaves
        the loss does not depend on get zeros.
        """
        if loss.graph is not self:
            raise ContractError("loss does not belong to this graph")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.node] = np.ones_like(loss.data)
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for src, ig in zip(node.inputs, in_grads):
                if src is None or ig is None:
                    continue
                grads[src] = ig if grads[src] is None else grads[src] + ig
            # interior gradients are no longer needed once propagated
            if not node.tag.startswith("leaf:"):
                grads[idx] = None
        out = {}
        for name, idx in self.leaves.items():
            g = grads[idx]
            out[name] = np.zeros_like(self._leaf_data[idx]) if g is None else g
        return out

    def record(self, tag: str, out: np.ndarray, inputs: Sequence[Tensor],
               backward: BackwardFn) -> Tensor:
        """Wrap ``out`` as the result of an op on ``inputs``.

        ``backward`` maps the output gradient to one gradient (or None) per
        input. If no input lives on a graph the result is a constant.
        """
        graph = None
        for t in inputs:
            if t.graph is not None:
                graph = t.graph
                break
        if graph is None:
            return Tensor(out)
        if graph is not self:
            return graph.record(tag, out, inputs, backward)
        ids = []
        for t in inputs:
            if t.graph is None:
                ids.append(None)
            elif t.graph is self:
                ids.append(t.node)
            else:
                raise ContractError("operands belong to different graphs")
        idx = self._append(tag, tuple(ids), backward, out)
        return Tensor(out, self, idx)


def record(tag: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Record an op on whichever graph its inputs live on (if any)."""
    for t in inputs:
        if t.graph is not None:
            return t.graph.record(tag, out, inputs, backward)
    return Tensor(out)


def backward(graph: Graph, loss: Tensor) -> dict:
    return graph.backward(loss)


def constant(value) -> Tensor:
    return Tensor(value)
