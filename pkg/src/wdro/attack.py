"""Distributional first-order attacks: W-FGSM, W-PGD and the pointwise PGD baseline.

Each W-PGD iteration recomputes Upsilon over the current iterates, takes the
first-order ascent step

    x <- x + alpha * h(grad_x J) * (||grad_x J||_s / Upsilon)^(q-1)

projects the iterate set back into the ``W_p`` ball around the clean data and
clamps features to ``[0, 1]``.  At ``p = r = inf`` the weight is one and
``h = sgn``, which is classical FGSM / PGD.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .losses import LossKind, LossModel
from .model import Network, in_S_logits
from .rng import derive_rng
from .sensitivity import DegenerateSensitivity, first_order_step, lq_mean
from .transport import INF, ThreatModel, aggregate, assignment, dual_norm, h_map, norm, project_features

COUPLINGS = ("identity", "exact")
UPSILON_SOURCES = ("iterate", "clean")


@dataclass(frozen=True)
class AttackConfig:
    threat: ThreatModel
    loss: LossKind = LossKind.CE
    steps: int = 50
    ratio: float = 2.5
    seed: int = 0
    coupling: str = "identity"
    restarts: int = 0
    upsilon_source: str = "iterate"
    project_to_sphere: bool = False
    # "best" returns the iterate with the lowest accuracy, "last" the final one
    select: str = "best"

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind.parse(self.loss))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.ratio > 0:
            raise ValueError("ratio must be positive")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")
        if self.upsilon_source not in UPSILON_SOURCES:
            raise ValueError(f"upsilon_source must be one of {UPSILON_SOURCES}")
        if self.select not in ("best", "last"):
            raise ValueError("select must be 'best' or 'last'")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")

    @property
    def step_size(self) -> float:
        return self.ratio * self.threat.delta / self.steps

    def to_dict(self) -> dict:
        return {"threat": self.threat.to_dict(), "loss": self.loss.value, "steps": self.steps,
                "ratio": self.ratio, "step_size": self.step_size, "seed": self.seed,
                "coupling": self.coupling, "restarts": self.restarts,
                "upsilon_source": self.upsilon_source, "project_to_sphere": self.project_to_sphere,
                "select": self.select}


@dataclass
class AttackResult:
    adversarial: LabeledDataset
    achieved_distance: float          # before clamping, identity coupling
    accuracy_trajectory: list[float]  # one entry per iteration
    final_adv_accuracy: float
    loss_trajectory: list[float] = field(default_factory=list)
    mean_loss: float = float("nan")   # mean loss of the returned iterate
    max_mean_loss: float = float("nan")  # best mean loss seen over all iterates
    best_iteration: int = 0
    upsilon_trajectory: list[float] = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"achieved_distance": self.achieved_distance,
                "accuracy_trajectory": list(self.accuracy_trajectory),
                "final_adv_accuracy": self.final_adv_accuracy,
                "loss_trajectory": list(self.loss_trajectory), "mean_loss": self.mean_loss,
                "max_mean_loss": self.max_mean_loss, "best_iteration": self.best_iteration,
                "upsilon_trajectory": list(self.upsilon_trajectory), "degenerate": self.degenerate}


def _project(orig: LabeledDataset, pert_x: np.ndarray, config: AttackConfig) -> np.ndarray:
    if config.coupling == "exact":
        perm = assignment(orig.x, orig.y, pert_x, orig.y, config.threat)
        pert_x = pert_x[perm]
    return project_features(orig.x, pert_x, config.threat, config.project_to_sphere)


def _distance(orig_x, x, threat: ThreatModel) -> float:
    return aggregate(norm(x - orig_x, threat.r), threat.p)


def _unchanged(lm: LossModel, data: LabeledDataset) -> AttackResult:
    ev = lm.evaluate(data.x, data.y, input_grad=False)
    acc = float(np.mean(in_S_logits(ev.logits, data.y)))
    loss = float(ev.values.mean())
    return AttackResult(data, 0.0, [acc], acc, [loss], loss, loss, 0, [0.0], degenerate=True)


def _ascent(lm: LossModel, data: LabeledDataset, config: AttackConfig, x_start: np.ndarray,
            weighted: bool) -> AttackResult:
    threat, alpha = config.threat, config.step_size
    y = data.y
    x = x_start
    ev = lm.evaluate(x, y)
    fixed_ups = None
    if weighted and config.upsilon_source == "clean":
        clean_grads = ev.input_grads if x_start is data.x else lm.input_grads(data.x, y)
        fixed_ups = lq_mean(dual_norm(clean_grads, threat.s), threat.q)

    iterates, dists, accs, losses, upss = [], [], [], [], []
    for t in range(config.steps):
        g = ev.input_grads
        if weighted:
            step, ups = first_order_step(g, threat, alpha, upsilon=fixed_ups)
        else:
            step, ups = alpha * h_map(g, threat.s), lq_mean(dual_norm(g, threat.s), threat.q)
        if ups == 0.0:
            if t == 0:
                return None
            break
        proj = _project(data, x + step, config)
        dists.append(_distance(data.x, proj, threat))
        x = np.clip(proj, 0.0, 1.0)
        ev = lm.evaluate(x, y)
        iterates.append(x)
        accs.append(float(np.mean(in_S_logits(ev.logits, y))))
        losses.append(float(ev.values.mean()))
        upss.append(ups)

    k = int(np.argmin(accs)) if config.select == "best" else len(accs) - 1
    return AttackResult(
        adversarial=data.with_features(iterates[k], clamp=False),
        achieved_distance=dists[k],
        accuracy_trajectory=accs,
        final_adv_accuracy=accs[k],
        loss_trajectory=losses,
        mean_loss=losses[k],
        max_mean_loss=max(losses),
        best_iteration=k + 1,
        upsilon_trajectory=upss,
    )


def _random_start(data: LabeledDataset, config: AttackConfig, k: int) -> np.ndarray:
    rng = derive_rng(config.seed, f"attack.restart.{k}")
    delta = config.threat.delta
    noise = rng.uniform(-delta, delta, size=data.x.shape)
    return np.clip(project_features(data.x, data.x + noise, config.threat), 0.0, 1.0)


def _run(net: Network, data: LabeledDataset, config: AttackConfig, weighted: bool) -> AttackResult:
    lm = LossModel(net, config.loss)
    if config.threat.delta == 0.0:
        res = _unchanged(lm, data)
        res.degenerate = False
        return res
    starts = [data.x] + [_random_start(data, config, k) for k in range(config.restarts)]
    best = None
    for x0 in starts:
        res = _ascent(lm, data, config, x0, weighted)
        if res is None:
            if x0 is data.x:
                warnings.warn("Upsilon = 0 at the clean data: attack left the data unchanged",
                              DegenerateSensitivity, stacklevel=3)
                return _unchanged(lm, data)
            continue
        if best is None or res.final_adv_accuracy < best.final_adv_accuracy:
            best = res
    return best


def wpgd(net: Network, data: LabeledDataset, config: AttackConfig) -> AttackResult:
    """Multi-step Wasserstein PGD with per-iteration Upsilon and ball projection."""
    return _run(net, data, config, weighted=True)


def wfgsm(net: Network, data: LabeledDataset, config: AttackConfig) -> AttackResult:
    """Single first-order step of full budget ``delta``, projected and clamped."""
    single = replace(config, steps=1, ratio=1.0, restarts=0, upsilon_source="iterate", select="last")
    return _run(net, data, single, weighted=True)


def classic_pgd(net: Network, data: LabeledDataset, config: AttackConfig) -> AttackResult:
    """Pointwise ``l_r``-ball PGD (steps along ``h(grad)``), only for ``p = inf``."""
    if config.threat.p != INF:
        raise ValueError("classic PGD is the p = inf threat model")
    return _run(net, data, config, weighted=False)
