"""Adversarial accuracy, the relative robustness ratio and its first-order bounds.

``R = A_delta / A`` is sandwiched between an attack-based upper bound
``R_upper = Q_delta(S) / A`` and sensitivity-based lower bounds

    R_lower_tilde = (W0 - E_{Q_delta}[J]) / (W0 - V0)
    R_lower_bar   = (W0 - V0 - delta * Upsilon) / (W0 - V0)

where ``C0``/``W0`` are the mean clean losses over correctly / incorrectly
classified samples and ``V0 = A*C0 + (1-A)*W0``.  All lower bounds are
asymptotic (first order in ``delta``); remainders are not estimated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig, wpgd
from .data import LabeledDataset
from .losses import LossKind, LossModel
from .model import Network, clean_accuracy, in_S_logits
from .sensitivity import qdelta_displacement, upsilon as compute_upsilon
from .transport import INF, ThreatModel

DENOM_EPS = 1e-12
CAVEAT = ("asymptotic first-order bounds: o(delta) and o(epsilon) remainders are dropped; "
          "the class-separation condition on the data is not verified")


class DegenerateBound(ArithmeticError):
    """A bound is undefined: accuracy is 0 or 1, or W0 - V0 vanishes."""


@dataclass
class RobustnessReport:
    A: float
    A_delta: float
    R: float
    R_upper: float
    R_lower_tilde: float
    R_lower_bar: float
    R_lower: float
    V0: float
    C0: float
    W0: float
    Upsilon: float
    V_delta_n: float
    delta: float
    threat: dict
    loss: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CleanLosses:
    C0: float
    W0: float
    A: float
    V0: float


def adv_accuracy(net: Network, adversarial: LabeledDataset) -> float:
    """Fraction of attacked samples still in S; an upper estimate of ``A_delta``."""
    return clean_accuracy(net, adversarial)


def conditional_clean_losses(net: Network, loss, data: LabeledDataset) -> CleanLosses:
    ev = LossModel(net, loss).evaluate(data.x, data.y, input_grad=False)
    mask = in_S_logits(ev.logits, data.y)
    A = float(mask.mean())
    if A in (0.0, 1.0):
        raise DegenerateBound(f"clean accuracy is {A}; conditional losses need 0 < A < 1")
    C0 = float(ev.values[mask].mean())
    W0 = float(ev.values[~mask].mean())
    if W0 <= C0:
        warnings.warn(f"misclassified mean loss W0={W0:.6g} does not exceed C0={C0:.6g}",
                      RuntimeWarning, stacklevel=2)
    return CleanLosses(C0, W0, A, float(ev.values.mean()))


def r_upper(A: float, A_Qdelta: float) -> float:
    if A <= 0:
        raise DegenerateBound("clean accuracy is zero")
    return A_Qdelta / A


def _ratio(num: float, den: float) -> float:
    if abs(den) < DENOM_EPS:
        raise DegenerateBound(f"W0 - V0 = {den:.3g} is too close to zero")
    return num / den


def r_lower(C0: float, W0: float, V0: float, A: float, delta: float, upsilon: float,
            e_qdelta_j: float) -> tuple[float, float, float]:
    """``(R_lower_tilde, R_lower_bar, min of both)``."""
    den = W0 - V0
    if den < 0:
        warnings.warn("W0 < V0: the lower bound is vacuous", RuntimeWarning, stacklevel=2)
    tilde = _ratio(W0 - e_qdelta_j, den)
    bar = _ratio(den - delta * upsilon, den)
    return tilde, bar, min(tilde, bar)


def r_lower_from_v(W0: float, V0: float, v_delta: float) -> float:
    """``(W0 - V(delta)) / (W0 - V0)`` for any estimate of ``V(delta)``."""
    return _ratio(W0 - v_delta, W0 - V0)


def v_delta_n(net: Network, loss, data: LabeledDataset, threat: ThreatModel, steps: int,
              ratio: float = 2.5, seed: int = 0) -> float:
    """Largest mean loss over the clean start and the iterates of a ``steps``-step W-PGD attack."""
    cfg = AttackConfig(threat=threat, loss=loss, steps=steps, ratio=ratio, seed=seed)
    start = float(LossModel(net, loss).values(data.x, data.y).mean())
    return max(start, wpgd(net, data, cfg).max_mean_loss)


def r_lower_n(net: Network, loss, data: LabeledDataset, threat: ThreatModel, steps: int,
              ratio: float = 2.5, seed: int = 0) -> float:
    """Refined lower bound with ``V(delta)`` estimated by a ``steps``-step W-PGD attack."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cl = conditional_clean_losses(net, loss, data)
    return r_lower_from_v(cl.W0, cl.V0, v_delta_n(net, loss, data, threat, steps, ratio, seed))


def reference_losses(threat: ThreatModel, m: int) -> tuple[LossKind, ...]:
    """Losses for the reference attack: CE and DLR for pointwise balls, ReDLR for distributional ones."""
    if m < 3:
        return (LossKind.CE,)
    if threat.p == INF:
        return (LossKind.CE, LossKind.DLR)
    return (LossKind.REDLR,)


def certify(net: Network, loss, data: LabeledDataset, threat: ThreatModel, *, steps: int = 50,
            ratio: float = 2.5, seed: int = 0, ref_losses=None) -> RobustnessReport:
    """All bounds for one (network, loss, dataset, threat) combination.

    ``A_delta`` is the lowest accuracy found by any attack that was run: the
    first-order displacement and W-PGD with the report loss and each
    reference loss.  ``V_delta_n`` is the best mean loss of the W-PGD run with
    the report loss.
    """
    kind = LossKind.parse(loss)
    delta = threat.delta
    cl = conditional_clean_losses(net, kind, data)
    sens = compute_upsilon(net, kind, data, threat)
    lm = LossModel(net, kind)

    q_x, _ = qdelta_displacement(net, kind, data, threat)
    q_data = data.with_features(q_x)
    q_eval = lm.evaluate(q_data.x, q_data.y, input_grad=False)
    a_q = float(np.mean(in_S_logits(q_eval.logits, data.y)))
    e_q = float(q_eval.values.mean())

    tilde, bar, low = r_lower(cl.C0, cl.W0, cl.V0, cl.A, delta, sens.upsilon, e_q)

    accs = [a_q]
    cfg = AttackConfig(threat=threat, loss=kind, steps=steps, ratio=ratio, seed=seed)
    main = wpgd(net, data, cfg)
    accs.append(main.final_adv_accuracy)
    v_n = max(main.max_mean_loss, cl.V0)
    for ref in ref_losses or reference_losses(threat, net.m):
        if LossKind.parse(ref) is not kind:
            accs.append(wpgd(net, data, AttackConfig(threat=threat, loss=ref, steps=steps,
                                                     ratio=ratio, seed=seed)).final_adv_accuracy)
    a_delta = min(accs)
    return RobustnessReport(
        A=cl.A, A_delta=a_delta, R=a_delta / cl.A, R_upper=r_upper(cl.A, a_q),
        R_lower_tilde=tilde, R_lower_bar=bar, R_lower=low,
        V0=cl.V0, C0=cl.C0, W0=cl.W0, Upsilon=sens.upsilon, V_delta_n=v_n,
        delta=delta, threat=threat.to_dict(), loss=kind.value,
    )


# out-of-sample guarantees

@dataclass(frozen=True)
class ConcentrationParams:
    K: float = 1.0
    n: int = 2
    N: int = 1
    M: int = 1
    epsilon: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError("K must be positive")
        if self.n < 1 or self.N < 1 or self.M < 1:
            raise ValueError("n, N and M must be positive")
        if self.epsilon < 0 or self.delta < 0:
            raise ValueError("radii must be nonnegative")


def concentration_probability(params: ConcentrationParams, mode: str = "one-sample",
                              radius: float | None = None) -> float:
    """Upper bound on the probability that the empirical measure is ``radius`` away.

    one-sample: ``min(1, K exp(-K N eps^n))``;
    two-sample: ``min(1, 2K exp(-K eps^n min(M, N)))``.
    """
    eps = params.epsilon if radius is None else radius
    K, n = params.K, params.n
    if mode == "one-sample":
        value = K * math.exp(-K * params.N * eps**n)
    elif mode == "two-sample":
        value = 2.0 * K * math.exp(-K * eps**n * min(params.M, params.N))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return min(1.0, max(0.0, value))


@dataclass(frozen=True)
class Guarantee:
    name: str
    bound: float
    kind: str                 # "lower" or "upper"
    failure_probability: float
    confidence: float
    label: str = "asymptotic, first-order"
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def oos_guarantees(report: RobustnessReport, params: ConcentrationParams, lipschitz: float,
                   e_q2eps: float | None = None) -> list[Guarantee]:
    """Out-of-sample statements from a report computed on the training sample.

    1. clean test accuracy >= A * R_lower at radius ``2 eps``;
    2. population adversarial loss ``V(delta) <= V_hat(delta) + L eps``;
    3. accuracy shortfall ``A - A_delta <= (V_hat(delta) - V_hat(0) + 2 L delta) / (W0 - C0)``.

    ``R_lower`` at ``2 eps`` uses the ``bar`` form from the report's Upsilon,
    and the ``min`` with the ``tilde`` form when ``e_q2eps`` (the mean loss
    under the first-order displacement of size ``2 eps``) is supplied.
    """
    eps, delta, L = params.epsilon, params.delta, lipschitz
    notes = []
    den = report.W0 - report.V0
    bar = _ratio(den - 2.0 * eps * report.Upsilon, den)
    r2 = bar if e_q2eps is None else min(bar, _ratio(report.W0 - e_q2eps, den))
    p1 = concentration_probability(params, "two-sample", eps)
    clean = Guarantee("clean_accuracy_lower_bound", report.A * r2, "lower", p1, 1.0 - p1)

    p2 = concentration_probability(params, "one-sample", eps)
    adv = Guarantee("adversarial_loss_upper_bound", report.V_delta_n + L * eps, "upper", p2, 1.0 - p2)

    gap = report.W0 - report.C0
    if abs(gap) < DENOM_EPS:
        raise DegenerateBound(f"W0 - C0 = {gap:.3g} is too close to zero")
    if gap < 1e-3:
        notes.append(f"small denominator W0 - C0 = {gap:.3g}")
    p3 = concentration_probability(params, "one-sample", delta)
    shortfall = Guarantee("adversarial_accuracy_shortfall_upper_bound",
                          (report.V_delta_n - report.V0 + 2.0 * L * delta) / gap, "upper", p3, 1.0 - p3,
                          notes=notes)
    return [clean, adv, shortfall]
