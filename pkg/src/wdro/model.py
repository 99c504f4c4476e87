"""Feedforward classifiers ``f = f_l o ... o f_1`` with ``f_i(x) = act(W_i x + b_i)``."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .ndgrad import Graph
from .rng import derive_rng

ACTIVATIONS = ("relu", "tanh", "identity")


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ModelError(f"layer weight {w.shape} and bias {b.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelError("non-finite layer parameters")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True, eq=False)
class Network:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ModelError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ModelError(f"layer output {a.out_dim} does not feed input {b.in_dim}")
        if layers[-1].activation != "identity":
            raise ModelError("final layer must output raw logits (identity activation)")
        if layers[-1].out_dim < 2:
            raise ModelError("need at least two classes")
        object.__setattr__(self, "layers", layers)

    @property
    def n(self) -> int:
        return self.layers[0].in_dim

    @property
    def m(self) -> int:
        return self.layers[-1].out_dim

    @property
    def activations(self) -> tuple[str, ...]:
        return tuple(layer.activation for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[w1, b1, w2, b2, ...]``."""
        return [p for layer in self.layers for p in (layer.w, layer.b)]

    def with_params(self, params) -> "Network":
        params = list(params)
        if len(params) != 2 * len(self.layers):
            raise ModelError("parameter list does not match the architecture")
        return Network(tuple(Layer(params[2 * i], params[2 * i + 1], layer.activation)
                             for i, layer in enumerate(self.layers)))

    def param_bindings(self, params=None) -> dict[str, np.ndarray]:
        params = self.params() if params is None else params
        out = {}
        for i in range(len(self.layers)):
            out[f"w{i}"] = params[2 * i]
            out[f"b{i}"] = params[2 * i + 1]
        return out


def init_network(sizes, activation: str = "relu", seed: int = 0) -> Network:
    """Uniform fan-based initialisation ``U[-a, a]`` with ``a = sqrt(6 / (in + out))``."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ModelError("need at least input and output sizes")
    rng = derive_rng(seed, "model.init")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = "identity" if i == len(sizes) - 2 else activation
        layers.append(Layer(w, b, act))
    return Network(tuple(layers))


def build_logits(g: Graph, x: int, activations) -> tuple[int, list[int]]:
    """Append the network body to ``g``; returns the logits node and parameter nodes."""
    h = x
    params = []
    for i, act in enumerate(activations):
        w = g.input(f"w{i}")
        b = g.input(f"b{i}")
        params += [w, b]
        h = g.affine(h, w, b)
        if act == "relu":
            h = g.relu(h)
        elif act == "tanh":
            h = g.tanh(h)
    return h, params


@lru_cache(maxsize=None)
def _logit_graph(activations: tuple[str, ...]):
    g = Graph()
    x = g.input("x")
    z, _ = build_logits(g, x, activations)
    return g, z


def forward(net: Network, x) -> np.ndarray:
    """Logits for one sample ``(n,)`` or a batch ``(N, n)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.n:
        raise ModelError(f"expected inputs with {net.n} features, got shape {x.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        warnings.warn("forward() input outside [0, 1]", RuntimeWarning, stacklevel=2)
    g, z = _logit_graph(net.activations)
    out = g.evaluate({"x": X, **net.param_bindings()})[z]
    return out[0] if single else out


def in_S_logits(z: np.ndarray, y) -> np.ndarray:
    """Strict unique argmax test on logits; ``y`` is 1-based."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y0 = np.atleast_1d(np.asarray(y)) - 1
    rows = np.arange(z.shape[0])
    zy = z[rows, y0]
    rest = z.copy()
    rest[rows, y0] = -np.inf
    return zy > rest.max(axis=1)


def in_S(net: Network, x, y) -> bool | np.ndarray:
    """Whether the logits' argmax is exactly the singleton ``{y}``."""
    z = forward(net, x)
    mask = in_S_logits(z, y)
    return bool(mask[0]) if np.ndim(x) == 1 else mask


def clean_accuracy(net: Network, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ModelError("empty dataset")
    return float(np.mean(in_S_logits(forward(net, data.x), data.y)))


def to_dict(net: Network) -> dict:
    return {
        "n": net.n,
        "m": net.m,
        "layers": [
            {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation,
             "w": layer.w.tolist(), "b": layer.b.tolist()}
            for layer in net.layers
        ],
    }


def from_dict(doc: dict) -> Network:
    try:
        n, m, specs = int(doc["n"]), int(doc["m"]), doc["layers"]
        layers = []
        for k, spec in enumerate(specs):
            w = np.array(spec["w"], dtype=np.float64)
            b = np.array(spec["b"], dtype=np.float64)
            if w.shape != (spec["out"], spec["in"]) or b.shape != (spec["out"],):
                raise ModelError(f"layer {k}: declared {spec['in']}->{spec['out']} "
                                 f"but w has shape {w.shape} and b {b.shape}")
            layers.append(Layer(w, b, spec["activation"]))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model document: {exc!r}") from None
    net = Network(tuple(layers))
    if net.n != n or net.m != m:
        raise ModelError(f"declared n={n}, m={m} but layers give n={net.n}, m={net.m}")
    return net


def save_model(net: Network, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(to_dict(net)))


def load_model(path) -> Network:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
    return from_dict(doc)
