"""Feature-space geometry for Wasserstein threat models.

The ground cost between labeled samples is ``||x - x'||_r`` when the labels
agree and ``+inf`` otherwise, so transport never moves a label.  Empirical
distances are computed along an explicit bijection between two equal-size
samples: either the identity coupling (sample ``i`` to its own perturbation)
or an optimal assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .data import LabeledDataset

INF = math.inf
BALL_TOL = 1e-9
# relative slack below which an iterate already counts as inside the ball
_INSIDE_RTOL = 1e-12


class InfeasibleTransport(ValueError):
    pass


def parse_index(value) -> float:
    """Parse a norm index: ``2`` or the string ``"inf"``."""
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("inf", "infinity", "∞"):
            return INF
        value = float(v)
    value = float(value)
    if value not in (2.0, INF):
        raise ValueError(f"index must be 2 or inf, got {value}")
    return value


def conjugate(index: float) -> float:
    if index == INF:
        return 1.0
    if index == 1.0:
        return INF
    return index / (index - 1.0)


def format_index(index: float) -> str:
    return "inf" if index == INF else f"{index:g}"


@dataclass(frozen=True)
class ThreatModel:
    """``(W_p, l_r)`` ball of radius ``delta``."""

    p: float = 2.0
    r: float = 2.0
    delta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "p", parse_index(self.p))
        object.__setattr__(self, "r", parse_index(self.r))
        if not (self.delta >= 0.0 and math.isfinite(self.delta)):
            raise ValueError("delta must be a finite nonnegative number")

    @property
    def q(self) -> float:
        return conjugate(self.p)

    @property
    def s(self) -> float:
        return conjugate(self.r)

    def with_delta(self, delta: float) -> "ThreatModel":
        return ThreatModel(self.p, self.r, delta)

    def to_dict(self) -> dict:
        return {"p": format_index(self.p), "r": format_index(self.r), "delta": self.delta,
                "q": format_index(self.q), "s": format_index(self.s)}


def norm(v, index: float) -> np.ndarray:
    """Row-wise ``l_index`` norm (last axis)."""
    v = np.asarray(v, dtype=np.float64)
    if index == INF:
        return np.abs(v).max(axis=-1)
    if index == 1.0:
        return np.abs(v).sum(axis=-1)
    if index == 2.0:
        # scaled by the largest entry so tiny vectors do not underflow to zero
        big = np.abs(v).max(axis=-1, keepdims=True)
        safe = np.where(big > 0, big, 1.0)
        return big[..., 0] * np.sqrt(((v / safe) ** 2).sum(axis=-1))
    return (np.abs(v) ** index).sum(axis=-1) ** (1.0 / index)


def dual_norm(v, s: float) -> np.ndarray:
    return norm(v, s)


def h_map(v, s: float) -> np.ndarray:
    """Unit direction ``h`` with ``<h(v), v> = ||v||_s``; ``h(0) = 0``.

    ``sgn(v)`` for ``s = 1`` and ``v / ||v||_2`` for ``s = 2``.
    """
    v = np.asarray(v, dtype=np.float64)
    if s == 1.0:
        return np.sign(v)
    if s == 2.0:
        nv = norm(v, 2.0)[..., None]
        return np.divide(v, nv, out=np.zeros_like(v), where=nv > 0)
    raise ValueError(f"h_map is implemented for s in {{1, 2}}, got {s}")


def pseudo_distance(a, b, r: float) -> float:
    """``||x - x'||_r`` for equal labels, ``+inf`` otherwise; ``a``/``b`` are ``(x, y)`` pairs."""
    (xa, ya), (xb, yb) = a, b
    xa, xb = np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ValueError("feature dimensions differ")
    if ya != yb:
        return INF
    return float(norm(xa - xb, parse_index(r)))


def aggregate(costs: np.ndarray, p: float) -> float:
    """``(mean d^p)^(1/p)``, or ``max d`` for ``p = inf``."""
    costs = np.asarray(costs, dtype=np.float64)
    if np.any(np.isinf(costs)):
        return INF
    if p == INF:
        return float(costs.max())
    return float(np.mean(costs**p) ** (1.0 / p))


@dataclass(frozen=True)
class TransportPlan:
    """Bijection ``i -> perm[i]`` from samples of P to samples of Q."""

    perm: np.ndarray
    costs: np.ndarray = field(default=None)
    distance: float = field(default=None)

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("transport plan must be a permutation")
        object.__setattr__(self, "perm", perm)

    @classmethod
    def identity(cls, size: int) -> "TransportPlan":
        return cls(np.arange(size))

    def inverse(self) -> "TransportPlan":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return TransportPlan(inv)


def pair_costs(P: LabeledDataset, Q: LabeledDataset, r: float, plan: TransportPlan | None = None) -> np.ndarray:
    if len(P) != len(Q):
        raise ValueError(f"sample sizes differ: {len(P)} vs {len(Q)}")
    perm = np.arange(len(P)) if plan is None else plan.perm
    costs = norm(P.x - Q.x[perm], r)
    return np.where(P.y == Q.y[perm], costs, INF)


def empirical_wasserstein(P: LabeledDataset, Q: LabeledDataset, threat: ThreatModel,
                          plan: TransportPlan | None = None) -> float:
    """Transport cost of ``plan`` (identity by default) under the threat's ``(p, r)``."""
    return aggregate(pair_costs(P, Q, threat.r, plan), threat.p)


def _bottleneck(cost: np.ndarray) -> np.ndarray:
    """Assignment minimising the largest matched cost (threshold search + matching)."""
    k = cost.shape[0]
    levels = np.unique(cost)
    lo, hi = 0, len(levels) - 1
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        match = maximum_bipartite_matching(csr_matrix(cost <= levels[mid]), perm_type="column")
        if np.all(match >= 0):
            best, hi = match, mid - 1
        else:
            lo = mid + 1
    assert best is not None and len(best) == k
    return best


def assignment(xp, yp, xq, yq, threat: ThreatModel) -> np.ndarray:
    """Optimal permutation between two labeled point sets given as raw arrays.

    Labels partition the problem (cross-label cost is infinite), so each class
    is solved separately: a linear assignment on ``d^p`` for finite ``p`` and
    a bottleneck assignment on ``d`` for ``p = inf``.
    """
    yp, yq = np.asarray(yp), np.asarray(yq)
    if not np.array_equal(np.sort(yp), np.sort(yq)):
        raise InfeasibleTransport("label multisets differ; every coupling has infinite cost")
    perm = np.empty(len(yp), dtype=np.int64)
    for label in np.unique(yp):
        rows = np.flatnonzero(yp == label)
        cols = np.flatnonzero(yq == label)
        d = norm(xp[rows][:, None, :] - xq[cols][None, :, :], threat.r)
        if threat.p == INF:
            match = _bottleneck(d)
        else:
            _, match = linear_sum_assignment(d**threat.p)
        perm[rows] = cols[match]
    return perm


def exact_ot(P: LabeledDataset, Q: LabeledDataset, threat: ThreatModel, max_size: int = 512) -> TransportPlan:
    """Minimum-cost bijection between two equal-size labeled samples."""
    if len(P) != len(Q):
        raise ValueError(f"sample sizes differ: {len(P)} vs {len(Q)}")
    if len(P) > max_size:
        raise ValueError(f"exact OT is capped at {max_size} samples, got {len(P)}")
    perm = assignment(P.x, P.y, Q.x, Q.y, threat)
    costs = pair_costs(P, Q, threat.r, TransportPlan(perm))
    return TransportPlan(perm, costs, aggregate(costs, threat.p))


def project_displacement(disp: np.ndarray, threat: ThreatModel, to_sphere: bool = False) -> np.ndarray:
    """Pull a displacement field back into the ball; returns the new field.

    For finite ``p`` every displacement is rescaled by ``delta / d`` when the
    current distance ``d`` exceeds ``delta``.  For ``p = inf`` the ball under
    a fixed coupling is a product of per-sample ``l_r`` balls, so each
    sample is projected onto its own ball (coordinate clipping for ``r = inf``).
    ``to_sphere`` applies the rescaling unconditionally, landing at distance
    exactly ``delta``.
    """
    disp = np.asarray(disp, dtype=np.float64)
    delta = threat.delta
    per = norm(disp, threat.r)
    if to_sphere:
        d = aggregate(per, threat.p)
        return disp * (delta / d) if d > 0 else disp.copy()
    if threat.p != INF:
        d = aggregate(per, threat.p)
        if d <= delta * (1.0 + _INSIDE_RTOL):
            return disp
        return disp * (delta / d)
    if threat.r == INF:
        return np.clip(disp, -delta, delta)
    scale = np.where(per > delta * (1.0 + _INSIDE_RTOL), delta / np.where(per > 0, per, 1.0), 1.0)
    return disp * scale[:, None]


def project_features(orig_x: np.ndarray, pert_x: np.ndarray, threat: ThreatModel,
                     to_sphere: bool = False) -> np.ndarray:
    """Identity-coupling projection on raw feature arrays, before clamping."""
    orig_x = np.asarray(orig_x, dtype=np.float64)
    pert_x = np.asarray(pert_x, dtype=np.float64)
    if threat.p == INF and threat.r == INF and not to_sphere:
        # written as a box clip so in-ball coordinates keep their exact bits
        return np.clip(pert_x, orig_x - threat.delta, orig_x + threat.delta)
    disp = pert_x - orig_x
    new = project_displacement(disp, threat, to_sphere)
    if new is disp:
        return pert_x
    return orig_x + new


def project_ball(orig: LabeledDataset, pert: LabeledDataset, threat: ThreatModel,
                 coupling: str = "identity", to_sphere: bool = False) -> LabeledDataset:
    """Project ``pert`` into the ``W_p`` ball of radius ``delta`` around ``orig``, then clamp to ``[0,1]``.

    The result is indexed like ``orig``: sample ``i`` is moved towards its
    coupled partner in ``pert``.  A perturbation already inside the ball is
    returned unchanged (up to clamping) unless ``to_sphere`` is set.
    """
    if len(orig) != len(pert):
        raise ValueError("orig and pert differ in size")
    if coupling == "identity":
        if not np.array_equal(orig.y, pert.y):
            raise ValueError("identity coupling needs aligned labels")
        target = pert.x
    elif coupling == "exact":
        target = pert.x[exact_ot(orig, pert, threat).perm]
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    return orig.with_features(project_features(orig.x, target, threat, to_sphere))
