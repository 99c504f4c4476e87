"""First-order sensitivity of the worst-case expected loss over a Wasserstein ball.

For a ball of radius ``delta`` the worst-case loss grows like
``V(0) + delta * Upsilon`` where ``Upsilon`` is the ``L^q`` mean of the
per-sample dual norms ``||grad_x J||_s``.  The matching first-order worst-case
distribution moves each sample by

    delta * h(grad_x J) * (||grad_x J||_s / Upsilon)^(q - 1)

with ``h`` the dual alignment map from :func:`wdro.transport.h_map`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .losses import LossKind, LossModel
from .model import Network
from .transport import INF, ThreatModel, dual_norm, h_map


class DegenerateSensitivity(UserWarning):
    """Every per-sample gradient vanished, so Upsilon = 0 and no direction exists."""


@dataclass(frozen=True)
class SensitivityReport:
    upsilon: float
    v0: float
    per_sample_dual_norms: np.ndarray
    threat: ThreatModel
    loss: LossKind

    def to_dict(self) -> dict:
        return {"upsilon": self.upsilon, "v0": self.v0,
                "per_sample_dual_norms": self.per_sample_dual_norms.tolist(),
                "threat": self.threat.to_dict(), "loss": self.loss.value}


def lq_mean(values, q: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if q == INF:
        return float(values.max())
    if q == 1.0:
        return float(values.mean())
    return float(np.mean(values**q) ** (1.0 / q))


def displacement_weights(norms, upsilon: float, q: float) -> np.ndarray:
    """``(||g|| / Upsilon)^(q-1)`` with the convention ``0^0 = 0`` at zero gradients."""
    norms = np.asarray(norms, dtype=np.float64)
    if upsilon <= 0.0:
        return np.zeros_like(norms)
    if q == 1.0:
        return (norms > 0).astype(np.float64)
    return (norms / upsilon) ** (q - 1.0)


def first_order_step(grads: np.ndarray, threat: ThreatModel, size: float,
                     upsilon: float | None = None) -> tuple[np.ndarray, float]:
    """Displacement field ``size * h(g) * (||g||_s / Upsilon)^(q-1)`` and the Upsilon used.

    ``upsilon`` defaults to the ``L^q`` mean of the rows of ``grads``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    norms = dual_norm(grads, threat.s)
    if upsilon is None:
        upsilon = lq_mean(norms, threat.q)
    w = displacement_weights(norms, upsilon, threat.q)
    return size * h_map(grads, threat.s) * w[:, None], upsilon


def upsilon(net: Network, loss, data: LabeledDataset, threat: ThreatModel) -> SensitivityReport:
    if len(data) == 0:
        raise ValueError("empty dataset")
    kind = LossKind.parse(loss)
    ev = LossModel(net, kind).evaluate(data.x, data.y)
    norms = dual_norm(ev.input_grads, threat.s)
    return SensitivityReport(lq_mean(norms, threat.q), float(ev.values.mean()), norms, threat, kind)


def first_order_adv_loss(v0: float, delta: float, upsilon: float) -> float:
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return v0 + delta * upsilon


def qdelta_displacement(net: Network, loss, data: LabeledDataset, threat: ThreatModel,
                        delta: float | None = None) -> tuple[np.ndarray, float]:
    """Unclamped first-order worst-case features and the Upsilon they were built from."""
    delta = threat.delta if delta is None else delta
    grads = LossModel(net, loss).input_grads(data.x, data.y)
    disp, ups = first_order_step(grads, threat, delta)
    return data.x + disp, ups


def qdelta_displace(net: Network, loss, data: LabeledDataset, threat: ThreatModel,
                    delta: float | None = None) -> LabeledDataset:
    """First-order worst-case distribution ``Q_delta`` as a moved dataset (clamped to the box).

    Returns ``data`` unchanged and emits :class:`DegenerateSensitivity` when
    every gradient vanishes.
    """
    moved, ups = qdelta_displacement(net, loss, data, threat, delta)
    if ups == 0.0:
        warnings.warn("Upsilon = 0: no first-order direction, data left unchanged",
                      DegenerateSensitivity, stacklevel=2)
        return data
    return data.with_features(moved)
