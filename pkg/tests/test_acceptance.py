"""Acceptance criteria, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines appear even when
output capture is on.
"""

import itertools
import math
import time

import numpy as np
import pytest

from _suite import random_data, random_net
from wdro.attack import AttackConfig, wfgsm, wpgd
from wdro.data import DatasetSpec, LabeledDataset, generate, split
from wdro.gradcheck import run_suite
from wdro.losses import LossModel
from wdro.model import in_S_logits, init_network
from wdro.robustness import (
    ConcentrationParams, certify, concentration_probability, conditional_clean_losses, oos_guarantees,
    r_lower_n, v_delta_n,
)
from wdro.sensitivity import qdelta_displacement, upsilon
from wdro.training import TrainConfig, train
from wdro.transport import ThreatModel, TransportPlan, aggregate, empirical_wasserstein, exact_ot, norm


@pytest.fixture
def report(capsys):
    def emit(k: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


def test_criterion_1_gradients(report):
    t0 = time.perf_counter()
    checks = run_suite(seed=0, count=100)
    elapsed = time.perf_counter() - t0
    worst = max(c.max_error for c in checks)
    ok = worst <= 1e-4 and elapsed < 30.0 and len(checks) == 300
    report(1, ok, f"max relative error {worst:.2e} over {len(checks)} checks in {elapsed:.1f}s")
    assert ok


def test_criterion_2_first_order_law(suite, report):
    t0 = time.perf_counter()
    net, data = suite[0]
    threat = ThreatModel(2, 2, 0.0)
    sens = upsilon(net, "ce", data, threat)
    deltas = (0.04, 0.02, 0.01)
    res = [abs(v_delta_n(net, "ce", data, threat.with_delta(d), 50) - sens.v0 - d * sens.upsilon) for d in deltas]
    ratios = [res[1] / res[0], res[2] / res[1]]
    elapsed = time.perf_counter() - t0
    ok = all(r <= 0.6 for r in ratios) and elapsed < 120.0
    report(2, ok, f"residuals {[f'{r:.2e}' for r in res]} ratios {[round(r, 3) for r in ratios]} "
                  f"in {elapsed:.1f}s")
    assert ok


def test_criterion_3_qdelta_feasibility(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(20):
        p = 2 if k % 2 == 0 else "inf"
        t = ThreatModel(p, ["inf", 2][(k // 2) % 2], float(rng.uniform(0.01, 0.2)))
        n, m = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        net = random_net(rng, [n, 6, m])
        data = random_data(rng, int(rng.integers(3, 30)), n, m)
        moved, ups = qdelta_displacement(net, "ce", data, t)
        assert ups > 0
        dist = aggregate(norm(moved - data.x, t.r), t.p)
        err = abs(dist - t.delta) if t.p == 2 else max(dist - t.delta, 0.0)
        worst = max(worst, err)
    ok = worst <= 1e-9
    report(3, ok, f"worst deviation {worst:.2e} over 20 configs")
    assert ok


def _fgsm(lm, x, y, delta):
    return np.clip(x + delta * np.sign(lm.input_grads(x, y)), 0.0, 1.0)


def _pgd(lm, x0, y, delta, alpha, steps):
    x, best, best_acc = x0, None, np.inf
    for _ in range(steps):
        x = np.clip(np.clip(x + alpha * np.sign(lm.input_grads(x, y)), x0 - delta, x0 + delta), 0.0, 1.0)
        acc = np.mean(in_S_logits(lm.evaluate(x, y, input_grad=False).logits, y))
        if acc < best_acc:
            best, best_acc = x, acc
    return best


def test_criterion_4_fgsm_pgd_degeneration(suite, report):
    same = 0
    cases = 0
    for net, data in suite:
        for loss, delta in (("ce", 0.03), ("dlr", 0.06)):
            lm = LossModel(net, loss)
            cfg = AttackConfig(ThreatModel("inf", "inf", delta), loss, steps=20, seed=7)
            a = wfgsm(net, data, cfg).adversarial.x
            b = wpgd(net, data, cfg).adversarial.x
            same += a.tobytes() == _fgsm(lm, data.x, data.y, delta).tobytes()
            same += b.tobytes() == _pgd(lm, data.x, data.y, delta, cfg.step_size, 20).tobytes()
            cases += 2
    ok = same == cases
    report(4, ok, f"{same}/{cases} outputs bit-identical to the reference FGSM/PGD")
    assert ok


def test_criterion_5_exact_ot(report):
    rng = np.random.default_rng(5)
    threats = [ThreatModel(p, r) for p in (2, "inf") for r in (2, "inf")]
    matches = 0
    for k in range(50):
        t = threats[k % 4]
        N = int(rng.integers(1, 7))
        y = rng.integers(1, 3, N)
        P = LabeledDataset(rng.uniform(size=(N, 3)), y, 2)
        Q = LabeledDataset(rng.uniform(size=(N, 3)), rng.permutation(y), 2)
        brute = min(empirical_wasserstein(P, Q, t, TransportPlan(perm))
                    for perm in itertools.permutations(range(N)))
        matches += exact_ot(P, Q, t).distance == brute
    ok = matches == 50
    report(5, ok, f"{matches}/50 assignment costs equal the brute-force minimum")
    assert ok


def test_criterion_6_tower_identity(suite, report):
    rng = np.random.default_rng(6)
    triples = [(net, data) for net, data in suite]
    while len(triples) < 10:
        net, data = random_net(rng, [3, 5, 3]), random_data(rng, 40, 3, 3)
        acc = np.mean(in_S_logits(LossModel(net, "ce").evaluate(data.x, data.y, input_grad=False).logits, data.y))
        if 0 < acc < 1:
            triples.append((net, data))
    worst = 0.0
    for (net, data), loss in itertools.product(triples, ("ce", "dlr", "redlr")):
        cl = conditional_clean_losses(net, loss, data)
        worst = max(worst, abs(cl.V0 - (cl.A * cl.C0 + (1 - cl.A) * cl.W0)))
    ok = worst <= 1e-9
    report(6, ok, f"worst |V0 - (A C0 + (1-A) W0)| = {worst:.2e} over {3 * len(triples)} triples")
    assert ok


def test_criterion_7_bound_sandwich(suite, report):
    t = ThreatModel(2, 2, 0.01)
    lines, ok_sandwich, ok_refine = [], True, True
    for net, data in suite:
        rep = certify(net, "ce", data, t, steps=50)
        rl5, rl50 = r_lower_n(net, "ce", data, t, 5), r_lower_n(net, "ce", data, t, 50)
        ok_sandwich &= rep.R_lower <= rep.R + 0.02 and rep.R <= rep.R_upper + 1e-9
        ok_refine &= rl50 >= rl5 - 1e-9
        lines.append(f"Rl={rep.R_lower:.4f} R={rep.R:.4f} Ru={rep.R_upper:.4f} "
                     f"Rl(5)={rl5:.6f} Rl(50)={rl50:.6f}")
    ok = ok_sandwich and ok_refine
    report(7, ok, f"sandwich {'ok' if ok_sandwich else 'violated'}, "
                  f"Rl(50) >= Rl(5) {'ok' if ok_refine else 'violated'}; " + " | ".join(lines))
    assert ok_sandwich, "R_lower <= R + 0.02 or R <= R_upper + 1e-9 violated"
    assert ok_refine, "Rl(50) >= Rl(5) - 1e-9 violated"


def test_criterion_8_distributional_dominance(suite, report):
    delta = 0.05
    gaps, moved = [], 0
    for net, data in suite:
        w2 = wpgd(net, data, AttackConfig(ThreatModel(2, 2, delta), "redlr"))
        winf = min(wpgd(net, data, AttackConfig(ThreatModel("inf", 2, delta), loss)).final_adv_accuracy
                   for loss in ("ce", "dlr"))
        gaps.append(w2.final_adv_accuracy - winf)
        wrong = ~in_S_logits(LossModel(net, "ce").evaluate(data.x, data.y, input_grad=False).logits, data.y)
        moved += int(np.any(w2.adversarial.x[wrong] != data.x[wrong]))
    ok = max(gaps) <= 0.02 and moved == 0
    report(8, ok, f"A(W2 ReDLR) - A(Winf) per net {[round(g, 3) for g in gaps]}, "
                  f"nets moving misclassified points: {moved}")
    assert ok


def _blobs_task(seed):
    data = generate(DatasetSpec(m=2, N=200, seed=seed, separation=4.0))
    return split(data, 0.5, seed)


def test_criterion_9_training(report):
    t0 = time.perf_counter()
    zero_ok = True
    tr, _ = _blobs_task(0)
    base = init_network([2, 16, 2], "tanh", 0)
    clean = train(base, tr, TrainConfig(lr=0.3, epochs=20, batch_size=10, seed=0))
    for method in ("regularized", "perturbed"):
        robust = train(base, tr, TrainConfig(method=method, threat=ThreatModel(2, 2, 0.0), lr=0.3, epochs=20,
                                              batch_size=10, seed=0))
        zero_ok &= all(a.tobytes() == b.tobytes() for a, b in zip(clean.net.params(), robust.net.params()))

    threat = ThreatModel("inf", "inf", 0.1)
    wins, gaps = 0, []
    for seed in range(5):
        tr, te = _blobs_task(seed)
        net = init_network([2, 16, 2], "tanh", seed)
        accs = []
        for method in ("clean", "perturbed"):
            cfg = TrainConfig(method=method, threat=threat, lr=0.3, epochs=150, batch_size=10, seed=seed)
            trained = train(net, tr, cfg).net
            accs.append(wpgd(trained, te, AttackConfig(threat, "ce", steps=50)).final_adv_accuracy)
        gaps.append(accs[1] - accs[0])
        wins += accs[1] > accs[0]
    elapsed = time.perf_counter() - t0
    ok = zero_ok and wins >= 4 and elapsed < 300.0
    report(9, ok, f"delta=0 bit-identical: {zero_ok}; perturbed beats clean on {wins}/5 seeds "
                  f"(A_delta gains {[round(g, 3) for g in gaps]}) in {elapsed:.1f}s")
    assert ok


def test_criterion_10_concentration(suite, report):
    cases = [(1.0, 2, 1000, 500, 0.5), (1.0, 2, 10, 10, 0.1), (0.5, 3, 200, 50, 0.3), (2.0, 1, 1, 1, 0.0),
             (3.0, 4, 5000, 5000, 0.2), (0.1, 2, 100, 1000, 1.0), (1.5, 5, 50, 20, 0.9),
             (1.0, 10, 1_000_000, 1, 0.5), (0.8, 2, 300, 300, 0.05), (5.0, 3, 7, 9, 2.0)]
    worst, clipped = 0.0, True
    for K, n, N, M, eps in cases:
        prm = ConcentrationParams(K=K, n=n, N=N, M=M, epsilon=eps)
        one = min(1.0, K * math.exp(-K * N * eps**n))
        two = min(1.0, 2 * K * math.exp(-K * eps**n * min(M, N)))
        got1, got2 = concentration_probability(prm), concentration_probability(prm, "two-sample")
        worst = max(worst, abs(got1 - one), abs(got2 - two))
        clipped &= 0.0 <= got1 <= 1.0 and 0.0 <= got2 <= 1.0

    net, data = suite[0]
    rep = certify(net, "ce", data, ThreatModel(2, 2, 0.01), steps=10)
    g_eps0 = oos_guarantees(rep, ConcentrationParams(n=2, N=len(data), epsilon=0.0, delta=0.01), lipschitz=3.0)
    g_l0 = oos_guarantees(rep, ConcentrationParams(n=2, N=len(data), epsilon=0.2, delta=0.01), lipschitz=0.0)
    degen = g_eps0[0].bound == rep.A and g_l0[1].bound == rep.V_delta_n
    ok = worst <= 1e-12 and clipped and degen
    report(10, ok, f"max formula deviation {worst:.1e} on {len(cases)} sets, clipped: {clipped}, "
                   f"eps=0 and L=0 reduce exactly: {degen}")
    assert ok
