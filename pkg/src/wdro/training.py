"""Minibatch SGD: clean, Upsilon-regularised, and first-order adversarially perturbed.

Both robust schemes read Upsilon from a parameter snapshot taken at the start
of each epoch and refresh the snapshot only when the epoch ends, so
per-batch updates never need a full pass over the training set.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .losses import LossKind, LossModel
from .model import Network
from .ndgrad import NonFiniteError
from .rng import derive_rng
from .sensitivity import DegenerateSensitivity, displacement_weights, first_order_step, lq_mean
from .transport import ThreatModel, dual_norm, h_map, project_features

log = logging.getLogger(__name__)

METHODS = ("clean", "regularized", "perturbed")


class TrainingDiverged(ArithmeticError):
    """Raised when the loss stops being finite; ``state`` holds the last finite network."""

    def __init__(self, msg: str, state: Network, epoch: int, batch: int):
        super().__init__(msg)
        self.state = state
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    method: str = "clean"
    threat: ThreatModel = field(default_factory=ThreatModel)
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    fd_epsilon: float = 1e-4
    seed: int = 0
    loss: LossKind = LossKind.CE

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind.parse(self.loss))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.lr > 0 or not self.fd_epsilon > 0:
            raise ValueError("lr and fd_epsilon must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {"method": self.method, "threat": self.threat.to_dict(), "lr": self.lr,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "fd_epsilon": self.fd_epsilon, "seed": self.seed, "loss": self.loss.value}


@dataclass
class TrainResult:
    net: Network
    loss_history: list[float] = field(default_factory=list)      # mean training loss after each epoch
    upsilon_history: list[float] = field(default_factory=list)   # snapshot Upsilon per epoch
    prefactors: list[list[float]] = field(default_factory=list)  # per-batch Upsilon^(1-q) per epoch
    batches: list[list[np.ndarray]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


def directional_mixed_derivative(grad_theta, X, V, weights, eps: float):
    """Forward difference ``(grad_theta(X + eps V) - grad_theta(X)) / eps`` per parameter.

    ``grad_theta(X, weights)`` returns the parameter gradient of
    ``sum_i weights_i J(x_i)`` as a list of arrays.
    """
    base = grad_theta(X, weights)
    moved = grad_theta(X + eps * V, weights)
    return [(a - b) / eps for a, b in zip(moved, base)]


def grad_theta_upsilon(net: Network, loss, batch: LabeledDataset, threat: ThreatModel,
                       fd_epsilon: float = 1e-4, upsilon_ref: float | None = None,
                       params=None) -> list[np.ndarray]:
    """Minibatch estimate of the parameter gradient of Upsilon.

        Upsilon^(1-q) * mean_B <d_x d_theta J, h(d_x J)> ||d_x J||_s^(q-1)

    The mixed term is a directional finite difference of the parameter
    gradient along ``h(d_x J)``.  ``upsilon_ref`` supplies Upsilon from the
    epoch snapshot; by default it is computed on ``batch``.
    """
    lm = LossModel(net, loss)
    ev = lm.evaluate(batch.x, batch.y, params=params)
    norms = dual_norm(ev.input_grads, threat.s)
    ups = lq_mean(norms, threat.q) if upsilon_ref is None else upsilon_ref
    shapes = [p.shape for p in (net.params() if params is None else params)]
    if ups <= 0.0:
        warnings.warn("Upsilon = 0: regulariser gradient set to zero", DegenerateSensitivity, stacklevel=2)
        return [np.zeros(s) for s in shapes]
    # (||g|| / ups)^(q-1) * ups^(q-1) = ||g||^(q-1); the remaining ups^(1-q) is the prefactor
    w = displacement_weights(norms, ups, threat.q) * ups ** (threat.q - 1.0) / len(batch)
    prefactor = ups ** (1.0 - threat.q)
    V = h_map(ev.input_grads, threat.s)

    def grad_theta(X, weights):
        return lm.param_grads(X, batch.y, weights=weights, params=params)

    mixed = directional_mixed_derivative(grad_theta, batch.x, V, w, fd_epsilon)
    return [prefactor * m for m in mixed]


def _snapshot_upsilon(lm: LossModel, data: LabeledDataset, threat: ThreatModel, params) -> float:
    grads = lm.evaluate(data.x, data.y, params=params).input_grads
    return lq_mean(dual_norm(grads, threat.s), threat.q)


def _train(net: Network, data: LabeledDataset, config: TrainConfig) -> TrainResult:
    if config.batch_size > len(data):
        raise ValueError(f"batch size {config.batch_size} exceeds dataset size {len(data)}")
    lm = LossModel(net, config.loss)
    threat, delta, eta = config.threat, config.threat.delta, config.lr
    params = [p.copy() for p in net.params()]
    rng = derive_rng(config.seed, "training.batches")
    result = TrainResult(net)

    for epoch in range(config.epochs):
        # parameters frozen for the whole epoch: the asynchronous snapshot
        snapshot = [p.copy() for p in params]
        ups = None
        if config.method != "clean":
            ups = _snapshot_upsilon(lm, data, threat, snapshot)
            result.upsilon_history.append(ups)
            if ups <= 0.0:
                result.flags.append(f"epoch {epoch}: Upsilon = 0, robust term skipped")
        order = rng.permutation(len(data))
        batches = [order[i:i + config.batch_size] for i in range(0, len(data), config.batch_size)]
        result.batches.append(batches)
        prefactors = []
        for b, idx in enumerate(batches):
            batch = data.subset(idx)
            weights = np.full(len(idx), 1.0 / len(idx))
            X = batch.x
            try:
                if config.method == "perturbed" and ups > 0.0:
                    g = lm.evaluate(X, batch.y, params=params).input_grads
                    step, _ = first_order_step(g, threat, delta, upsilon=ups)
                    X = np.clip(project_features(batch.x, batch.x + step, threat), 0.0, 1.0)
                grads = lm.param_grads(X, batch.y, weights=weights, params=params)
                if config.method == "regularized":
                    prefactors.append(ups ** (1.0 - threat.q) if ups > 0 else 0.0)
                    # at delta = 0 the update is left untouched so it matches clean SGD bit for bit
                    if ups > 0.0 and delta > 0.0:
                        reg = grad_theta_upsilon(lm.net, config.loss, batch, threat, config.fd_epsilon,
                                                 upsilon_ref=ups, params=params)
                        grads = [g + delta * r for g, r in zip(grads, reg)]
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), net.with_params(params), epoch, b) from exc
            new = [p - eta * g for p, g in zip(params, grads)]
            if not all(np.all(np.isfinite(p)) for p in new):
                raise TrainingDiverged("non-finite parameters after update", net.with_params(params), epoch, b)
            params = new
        result.prefactors.append(prefactors)
        mean_loss = float(lm.evaluate(data.x, data.y, input_grad=False, params=params).values.mean())
        if not np.isfinite(mean_loss):
            raise TrainingDiverged("training loss is not finite", net.with_params(params), epoch, len(batches))
        result.loss_history.append(mean_loss)
        log.debug("epoch %d %s loss %.6f", epoch, config.method, mean_loss)

    result.net = net.with_params(params)
    return result


def train_clean(net: Network, data: LabeledDataset, config: TrainConfig) -> TrainResult:
    return _train(net, data, _with_method(config, "clean"))


def train_regularized(net: Network, data: LabeledDataset, config: TrainConfig) -> TrainResult:
    """SGD on ``J + delta * Upsilon`` with Upsilon's prefactor from the epoch snapshot."""
    return _train(net, data, _with_method(config, "regularized"))


def train_perturbed(net: Network, data: LabeledDataset, config: TrainConfig) -> TrainResult:
    """SGD on minibatches moved by a projected single-step W-FGSM displacement."""
    return _train(net, data, _with_method(config, "perturbed"))


def train(net: Network, data: LabeledDataset, config: TrainConfig) -> TrainResult:
    return _train(net, data, config)


def _with_method(config: TrainConfig, method: str) -> TrainConfig:
    return replace(config, method=method)
