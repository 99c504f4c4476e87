"""Central finite-difference checks of the reverse-mode gradients on random networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .losses import LossKind, LossModel
from .model import Layer, Network
from .rng import derive_rng

FD_STEP = 1e-5
TOLERANCE = 1e-4
# inputs whose relu pre-activations or DLR order gaps sit closer than this to a
# kink are resampled, so the difference quotient never straddles one
KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradCheck:
    net_index: int
    loss: str
    sizes: list
    activation: str
    input_error: float
    param_error: float

    @property
    def max_error(self) -> float:
        return max(self.input_error, self.param_error)

    def to_dict(self) -> dict:
        return {**asdict(self), "max_error": self.max_error}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``, zero when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-10:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def random_network(rng: np.random.Generator, max_layers: int = 3, max_width: int = 8) -> Network:
    n_layers = int(rng.integers(1, max_layers + 1))
    sizes = [int(rng.integers(1, max_width + 1))]
    sizes += [int(rng.integers(2, max_width + 1)) for _ in range(n_layers - 1)]
    sizes.append(int(rng.integers(3, max_width + 1)))
    activation = str(rng.choice(["relu", "tanh"]))
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = "identity" if i == n_layers - 1 else activation
        layers.append(Layer(rng.normal(0.0, 1.0, (b, a)), rng.normal(0.0, 0.5, b), act))
    return Network(tuple(layers))


def _near_kink(net: Network, X: np.ndarray) -> bool:
    h = X
    for layer in net.layers:
        a = h @ layer.w.T + layer.b
        if layer.activation == "relu":
            if np.any(np.abs(a) < KINK_MARGIN):
                return True
            h = np.maximum(a, 0.0)
        elif layer.activation == "tanh":
            h = np.tanh(a)
        else:
            h = a
    z = np.sort(h, axis=1)
    return bool(np.any(np.diff(z, axis=1) < KINK_MARGIN))


def _sample_inputs(net: Network, rng: np.random.Generator, size: int) -> np.ndarray:
    for _ in range(1000):
        X = rng.uniform(0.05, 0.95, (size, net.n))
        if not _near_kink(net, X):
            return X
    raise RuntimeError("could not sample inputs away from nondifferentiable points")


def check_network(net: Network, kind, X: np.ndarray, y: np.ndarray, step: float = FD_STEP) -> tuple[float, float]:
    """Relative errors of the input and parameter gradients of ``sum_i J(x_i, y_i)``."""
    lm = LossModel(net, kind)
    ev = lm.evaluate(X, y, param_grad=True)

    def total(Xv, params=None):
        return float(lm.evaluate(Xv, y, input_grad=False, params=params).values.sum())

    num_x = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        up, down = X.copy(), X.copy()
        up[idx] += step
        down[idx] -= step
        num_x[idx] = (total(up) - total(down)) / (2 * step)

    params = net.params()
    param_err = 0.0
    for k, p in enumerate(params):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            up = [q.copy() for q in params]
            down = [q.copy() for q in params]
            up[k][idx] += step
            down[k][idx] -= step
            num[idx] = (total(X, up) - total(X, down)) / (2 * step)
        param_err = max(param_err, relative_error(ev.param_grads[k], num))
    return relative_error(ev.input_grads, num_x), param_err


def run_suite(seed: int, count: int = 100, batch: int = 2) -> list[GradCheck]:
    """Check every loss on ``count`` random networks (at most 3 layers, width at most 8)."""
    rng = derive_rng(seed, "gradcheck")
    out = []
    for i in range(count):
        net = random_network(rng)
        X = _sample_inputs(net, rng, batch)
        y = rng.integers(1, net.m + 1, size=batch)
        sizes = [net.n] + [layer.out_dim for layer in net.layers]
        for kind in LossKind:
            e_in, e_par = check_network(net, kind, X, y)
            out.append(GradCheck(i, kind.value, sizes, net.activations[0], e_in, e_par))
    return out
