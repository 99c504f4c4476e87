"""Classification losses ``J(x, y) = L(f(x), y)``: cross entropy, DLR and rectified DLR."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .data import LabeledDataset
from .model import Network, build_logits
from .ndgrad import Graph
from .transport import dual_norm


class LossKind(str, Enum):
    CE = "ce"
    DLR = "dlr"
    REDLR = "redlr"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


def _append_loss(g: Graph, z: int, labels: int, kind: LossKind) -> int:
    if kind is LossKind.CE:
        return g.neg(g.pick(g.log_softmax(z), labels))
    return g.dlr(z, labels, rectified=kind is LossKind.REDLR)


@lru_cache(maxsize=None)
def _logit_loss_graph(kind: LossKind):
    g = Graph()
    z = g.input("z")
    lab = g.input("y", index=True)
    per = _append_loss(g, z, lab, kind)
    return g, z, per, g.sum(per)


def _logit_loss(z, y, kind: LossKind, with_grad: bool = False):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y0 = np.atleast_1d(np.asarray(y)) - 1
    g, zn, per, root = _logit_loss_graph(kind)
    ev = g.evaluate({"z": z, "y": y0})
    if with_grad:
        return ev[per], ev.gradient(root, zn)
    return ev[per]


def ce(z, y) -> float:
    """``-(log softmax z)_y`` for one logit vector, ``y`` 1-based."""
    return float(_logit_loss(z, y, LossKind.CE)[0])


def dlr(z, y) -> float:
    return float(_logit_loss(z, y, LossKind.DLR)[0])


def redlr(z, y) -> float:
    return float(_logit_loss(z, y, LossKind.REDLR)[0])


def logit_grad(kind, z, y) -> np.ndarray:
    """Gradient of the loss with respect to one logit vector."""
    _, grad = _logit_loss(z, y, LossKind.parse(kind), with_grad=True)
    return grad[0]


@dataclass
class LossEval:
    values: np.ndarray       # per-sample J, shape (N,)
    logits: np.ndarray       # (N, m)
    input_grads: np.ndarray | None = None   # (N, n)
    param_grads: list | None = None         # aligned with Network.params()


@lru_cache(maxsize=None)
def _loss_graph(activations: tuple[str, ...], kind: LossKind):
    g = Graph()
    x = g.input("x")
    lab = g.input("y", index=True)
    weights = g.input("weights")
    z, params = build_logits(g, x, activations)
    per = _append_loss(g, z, lab, kind)
    root = g.sum(g.mul(per, weights))
    return g, x, z, per, root, params


class LossModel:
    """A network paired with a loss; evaluates ``J`` and its gradients on batches.

    The root of the graph is ``sum_i weights_i * J(x_i, y_i)``.  With unit
    weights the input gradient row ``i`` is exactly ``grad_x J(x_i, y_i)``.
    """

    def __init__(self, net: Network, kind):
        self.net = net
        self.kind = LossKind.parse(kind)
        if self.kind is not LossKind.CE and net.m < 3:
            raise ValueError(f"{self.kind.value} loss needs at least 3 classes")
        self._g, self._x, self._z, self._per, self._root, self._params = _loss_graph(net.activations, self.kind)

    def evaluate(self, X, y, *, input_grad: bool = True, param_grad: bool = False,
                 weights=None, params=None) -> LossEval:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.net.n:
            raise ValueError(f"expected (N, {self.net.n}) inputs, got {X.shape}")
        y0 = np.asarray(y) - 1
        w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        ev = self._g.evaluate({"x": X, "y": y0, "weights": w, **self.net.param_bindings(params)})
        out = LossEval(values=ev[self._per], logits=ev[self._z])
        leaves = ([self._x] if input_grad else []) + (self._params if param_grad else [])
        if leaves:
            grads = ev.gradients(self._root, leaves)
            if input_grad:
                out.input_grads = grads[self._x]
            if param_grad:
                out.param_grads = [grads[p] for p in self._params]
        return out

    def values(self, X, y) -> np.ndarray:
        return self.evaluate(X, y, input_grad=False).values

    def input_grads(self, X, y) -> np.ndarray:
        return self.evaluate(X, y).input_grads

    def param_grads(self, X, y, weights=None, params=None) -> list[np.ndarray]:
        return self.evaluate(X, y, input_grad=False, param_grad=True,
                             weights=weights, params=params).param_grads


def loss_value(net: Network, kind, x, y):
    """``J(x, y)``; scalar for a single sample, array for a batch."""
    x = np.asarray(x, dtype=np.float64)
    vals = LossModel(net, kind).values(np.atleast_2d(x), np.atleast_1d(y))
    return float(vals[0]) if x.ndim == 1 else vals


def input_grad(net: Network, kind, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grads = LossModel(net, kind).input_grads(np.atleast_2d(x), np.atleast_1d(y))
    return grads[0] if x.ndim == 1 else grads


def estimate_lipschitz(net: Network, kind, data: LabeledDataset, s) -> float:
    """Largest dual norm of the input gradient over ``data``.

    This is an empirical lower estimate of the Lipschitz constant of ``J``,
    not a certified bound.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    grads = LossModel(net, kind).input_grads(data.x, data.y)
    return float(dual_norm(grads, s).max())
