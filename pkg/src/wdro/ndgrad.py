"""Static computation graphs over float64 numpy arrays with reverse-mode gradients.

A :class:`Graph` is built once (nodes are appended, never mutated) and then
evaluated against a set of leaf bindings.  Every evaluation returns a fresh
:class:`Evaluation` holding the forward cache, so one graph can be evaluated
from several threads at once as long as each thread keeps its own cache.

    g = Graph()
    x = g.input("x")
    w = g.input("w")
    b = g.input("b")
    out = g.sum(g.relu(g.affine(x, w, b)))
    ev = g.evaluate({"x": X, "w": W, "b": B})
    dx = ev.gradient(out, x)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

DLR_DENOM_EPS = 1e-12


class GraphError(ValueError):
    """Raised for malformed graphs or bindings."""


class ShapeError(GraphError):
    def __init__(self, node: int, op: str, msg: str):
        super().__init__(f"node {node} ({op}): {msg}")
        self.node = node


class NonFiniteError(ArithmeticError):
    def __init__(self, node: int, op: str):
        super().__init__(f"node {node} ({op}) produced a non-finite value")
        self.node = node


class UnreachableLeafWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Node:
    index: int
    op: str
    parents: tuple[int, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def order_statistics(z: np.ndarray) -> np.ndarray:
    """Indices of the three largest logits per row, ties broken by coordinate index."""
    return np.argsort(-z, axis=-1, kind="stable")[..., :3]


def _dlr_forward(z: np.ndarray, y: np.ndarray, rectified: bool):
    rows = np.arange(z.shape[0])
    top = order_statistics(z)
    zy = z[rows, y]
    others = z.copy()
    others[rows, y] = -np.inf
    correct = zy > others.max(axis=1)  # strict unique argmax, same rule as S-membership
    # on the correct branch z_(1) = z_y, so the numerator compares to z_(2)
    ref = np.where(correct, top[:, 1], top[:, 0])
    num = zy - z[rows, ref]
    den = z[rows, top[:, 0]] - z[rows, top[:, 2]]
    active = den >= DLR_DENOM_EPS
    if rectified:
        active &= correct
    safe_den = np.where(active, den, 1.0)
    out = np.where(active, -num / safe_den, 0.0)
    return out, (top, ref, num, safe_den, active)


def _dlr_backward(z, y, saved, upstream):
    top, ref, num, den, active = saved
    rows = np.arange(z.shape[0])
    u = np.where(active, upstream, 0.0)
    g = np.zeros_like(z)
    # L = -num/den with num = z_y - z_ref and den = z_top1 - z_top3
    dnum = -u / den
    dden = u * num / den**2
    np.add.at(g, (rows, y), dnum)
    np.add.at(g, (rows, ref), -dnum)
    np.add.at(g, (rows, top[:, 0]), dden)
    np.add.at(g, (rows, top[:, 2]), -dden)
    return g


class Graph:
    """Append-only DAG of array operations.

    Node kinds: ``input`` and ``const`` leaves, ``affine`` (``x @ w.T + b``),
    the activations ``relu``/``tanh``, ``log_softmax`` over the last axis,
    elementwise ``add``/``sub``/``mul``/``div`` with broadcasting, the
    reductions ``sum``/``mean``, the row gather ``pick`` and the order-statistic
    ``dlr`` loss node.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._inputs: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _add(self, op: str, *parents: int, **attrs) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"{op}: unknown parent node {p}")
        node = Node(len(self.nodes), op, tuple(parents), attrs)
        self.nodes.append(node)
        return node.index

    # leaves
    def input(self, name: str, index: bool = False) -> int:
        """Declare a named leaf.  ``index=True`` marks an integer (label) binding."""
        if name in self._inputs:
            raise GraphError(f"duplicate input {name!r}")
        idx = self._add("input", name=name, index=index)
        self._inputs[name] = idx
        return idx

    def const(self, value) -> int:
        return self._add("const", value=np.asarray(value, dtype=np.float64))

    @property
    def inputs(self) -> dict[str, int]:
        return dict(self._inputs)

    # operations
    def affine(self, x: int, w: int, b: int) -> int:
        return self._add("affine", x, w, b)

    def relu(self, x: int) -> int:
        return self._add("relu", x)

    def tanh(self, x: int) -> int:
        return self._add("tanh", x)

    def log_softmax(self, x: int) -> int:
        return self._add("log_softmax", x)

    def add(self, a: int, b: int) -> int:
        return self._add("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._add("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", a, b)

    def div(self, a: int, b: int) -> int:
        return self._add("div", a, b)

    def neg(self, a: int) -> int:
        return self._add("neg", a)

    def sum(self, x: int, axis: int | None = None) -> int:
        return self._add("sum", x, axis=axis)

    def mean(self, x: int, axis: int | None = None) -> int:
        return self._add("mean", x, axis=axis)

    def pick(self, x: int, labels: int) -> int:
        """Row-wise gather ``x[i, labels[i]]`` (labels are 0-based)."""
        return self._add("pick", x, labels)

    def dlr(self, z: int, labels: int, rectified: bool = False) -> int:
        """Per-row difference-of-logits-ratio loss (rectified variant optional)."""
        return self._add("dlr", z, labels, rectified=rectified)

    # evaluation
    def evaluate(self, bindings: Mapping[str, Any], check_finite: bool = True) -> "Evaluation":
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        saved: dict[int, Any] = {}
        for node in self.nodes:
            vals = [values[p] for p in node.parents]
            # non-finite results are reported below with the node index
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                out = self._forward(node, vals, bindings, saved)
            if check_finite and not node.attrs.get("index", False) and not np.all(np.isfinite(out)):
                raise NonFiniteError(node.index, node.op)
            values[node.index] = out
        return Evaluation(self, values, saved)

    def _forward(self, node: Node, vals, bindings, saved):
        op, i = node.op, node.index
        if op == "input":
            name = node.attrs["name"]
            if name not in bindings:
                raise GraphError(f"node {i}: missing binding for input {name!r}")
            if node.attrs["index"]:
                return np.asarray(bindings[name], dtype=np.int64)
            return np.asarray(bindings[name], dtype=np.float64)
        if op == "const":
            return node.attrs["value"]
        if op == "affine":
            x, w, b = vals
            if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
                raise ShapeError(i, op, f"x{x.shape} w{w.shape} b{b.shape}")
            return x @ w.T + b
        if op == "relu":
            return np.maximum(vals[0], 0.0)
        if op == "tanh":
            return np.tanh(vals[0])
        if op == "log_softmax":
            x = vals[0]
            shifted = x - x.max(axis=-1, keepdims=True)
            return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        if op in ("add", "sub", "mul", "div"):
            a, b = vals
            try:
                shape = np.broadcast_shapes(a.shape, b.shape)
            except ValueError:
                raise ShapeError(i, op, f"cannot broadcast {a.shape} with {b.shape}") from None
            if op == "add":
                return a + b
            if op == "sub":
                return a - b
            if op == "mul":
                return a * b
            return np.broadcast_to(a / b, shape)
        if op == "neg":
            return -vals[0]
        if op == "sum":
            return np.asarray(vals[0].sum(axis=node.attrs["axis"]))
        if op == "mean":
            return np.asarray(vals[0].mean(axis=node.attrs["axis"]))
        if op == "pick":
            x, lab = vals
            if x.ndim != 2 or lab.shape != (x.shape[0],):
                raise ShapeError(i, op, f"x{x.shape} labels{lab.shape}")
            if lab.size and (lab.min() < 0 or lab.max() >= x.shape[1]):
                raise ShapeError(i, op, "label out of range")
            return x[np.arange(x.shape[0]), lab]
        if op == "dlr":
            z, lab = vals
            if z.ndim != 2 or z.shape[1] < 3 or lab.shape != (z.shape[0],):
                raise ShapeError(i, op, f"needs (N, m>=3) logits, got z{z.shape} labels{lab.shape}")
            out, saved[i] = _dlr_forward(z, lab, node.attrs["rectified"])
            return out
        raise GraphError(f"node {i}: unknown op {op!r}")


class Evaluation:
    """Forward cache of one :meth:`Graph.evaluate` call."""

    def __init__(self, graph: Graph, values: list, saved: dict):
        self.graph = graph
        self.values = values
        self._saved = saved

    def __getitem__(self, node: int) -> np.ndarray:
        return self.values[node]

    def gradient(self, root: int, leaf: int) -> np.ndarray:
        return self.gradients(root, [leaf])[leaf]

    def gradients(self, root: int, leaves) -> dict[int, np.ndarray]:
        """d(root)/d(leaf) for each leaf; ``root`` must hold a single value."""
        if self.values[root].size != 1:
            raise GraphError(f"gradient root node {root} is not scalar (shape {self.values[root].shape})")
        nodes = self.graph.nodes
        reach = np.zeros(root + 1, dtype=bool)
        reach[root] = True
        for node in reversed(nodes[: root + 1]):
            if reach[node.index]:
                for p in node.parents:
                    reach[p] = True

        grads: dict[int, np.ndarray] = {root: np.ones_like(self.values[root])}
        for node in reversed(nodes[: root + 1]):
            g = grads.pop(node.index, None) if node.index not in leaves else grads.get(node.index)
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, self._backward(node, g)):
                if pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg

        out = {}
        for leaf in leaves:
            if leaf > root or not reach[leaf]:
                warnings.warn(f"node {leaf} is not reachable from node {root}; gradient is zero",
                              UnreachableLeafWarning, stacklevel=2)
                out[leaf] = np.zeros_like(self.values[leaf], dtype=np.float64)
            else:
                out[leaf] = grads.get(leaf, np.zeros_like(self.values[leaf], dtype=np.float64))
        return out

    def _backward(self, node: Node, g: np.ndarray):
        op = node.op
        vals = [self.values[p] for p in node.parents]
        out = self.values[node.index]
        if op == "affine":
            x, w, _ = vals
            gx = g @ w
            if x.ndim == 1:
                gw, gb = np.outer(g, x), g
            else:
                gw, gb = g.T @ x, g.sum(axis=0)
            return gx, gw, gb
        if op == "relu":
            # subgradient 0 at the kink
            return (g * (vals[0] > 0),)
        if op == "tanh":
            return (g * (1.0 - out**2),)
        if op == "log_softmax":
            soft = np.exp(out)
            return (g - soft * g.sum(axis=-1, keepdims=True),)
        if op == "add":
            return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)
        if op == "sub":
            return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)
        if op == "mul":
            a, b = vals
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        if op == "div":
            a, b = vals
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / b**2, b.shape)
        if op == "neg":
            return (-g,)
        if op in ("sum", "mean"):
            x = vals[0]
            axis = node.attrs["axis"]
            gg = g if axis is None else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, x.shape).astype(np.float64)
            if op == "mean":
                gx = gx * (out.size / x.size)
            return (gx,)
        if op == "pick":
            x, lab = vals
            gx = np.zeros_like(x)
            gx[np.arange(x.shape[0]), lab] = g
            return gx, None
        if op == "dlr":
            z, lab = vals
            return _dlr_backward(z, lab, self._saved[node.index], g), None
        raise GraphError(f"node {node.index}: no gradient rule for {op!r}")
