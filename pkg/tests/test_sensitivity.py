import numpy as np
import pytest

from _suite import random_data, random_net
from wdro.data import LabeledDataset
from wdro.losses import LossModel
from wdro.model import Layer, Network
from wdro.sensitivity import (DegenerateSensitivity, displacement_weights, first_order_adv_loss, first_order_step,
                              lq_mean, qdelta_displace, qdelta_displacement, upsilon)
from wdro.transport import ThreatModel, aggregate, dual_norm, norm


def test_upsilon_arithmetic_examples():
    assert lq_mean([5.0], 2.0) == 5.0
    assert lq_mean([2.0, 4.0], 1.0) == 3.0
    disp, ups = first_order_step(np.array([[3.0, 4.0]]), ThreatModel(2, 2, 0.1), 0.1)
    assert ups == 5.0
    assert np.allclose(disp, [[0.06, 0.08]], atol=1e-17)


def test_first_order_adv_loss():
    assert first_order_adv_loss(1.0, 0.1, 5.0) == pytest.approx(1.5)
    assert first_order_adv_loss(1.0, 0.0, 5.0) == 1.0
    a, b = first_order_adv_loss(1.0, 0.2, 5.0), first_order_adv_loss(1.0, 0.1, 5.0)
    assert a - b == pytest.approx(0.1 * 5.0, abs=1e-15)
    with pytest.raises(ValueError):
        first_order_adv_loss(1.0, -0.1, 5.0)


def test_zero_gradient_weight_convention():
    assert np.array_equal(displacement_weights([0.0, 2.0], 1.0, 1.0), [0.0, 1.0])
    assert np.array_equal(displacement_weights([0.0, 2.0], 2.0, 2.0), [0.0, 1.0])
    disp, _ = first_order_step(np.array([[0.0, 0.0], [3.0, 4.0]]), ThreatModel(2, 2, 0.1), 0.1)
    assert not disp[0].any()


@pytest.mark.parametrize("p,r", [(2, 2), (2, "inf"), ("inf", 2), ("inf", "inf")])
def test_upsilon_report_matches_gradients(p, r):
    rng = np.random.default_rng(0)
    net = random_net(rng, [3, 5, 3])
    data = random_data(rng, 20, 3, 3)
    t = ThreatModel(p, r, 0.1)
    rep = upsilon(net, "ce", data, t)
    grads = LossModel(net, "ce").input_grads(data.x, data.y)
    norms = dual_norm(grads, t.s)
    assert np.array_equal(rep.per_sample_dual_norms, norms)
    assert abs(rep.upsilon - np.mean(norms**t.q) ** (1 / t.q)) <= 1e-12
    assert rep.v0 == pytest.approx(LossModel(net, "ce").values(data.x, data.y).mean(), abs=1e-15)


def _constant_net(m=3, n=2):
    return Network((Layer(np.zeros((m, n)), np.arange(m, dtype=float), "identity"),))


def test_zero_gradients_give_zero_upsilon_and_unchanged_data():
    data = random_data(np.random.default_rng(1), 10, 2, 3)
    t = ThreatModel(2, 2, 0.1)
    assert upsilon(_constant_net(), "ce", data, t).upsilon == 0.0
    with pytest.warns(DegenerateSensitivity):
        out = qdelta_displace(_constant_net(), "ce", data, t)
    assert out is data


def test_fgsm_displacement_at_infinity():
    rng = np.random.default_rng(2)
    net = random_net(rng, [4, 6, 3])
    data = random_data(rng, 15, 4, 3)
    t = ThreatModel("inf", "inf", 0.03)
    moved, _ = qdelta_displacement(net, "ce", data, t)
    g = LossModel(net, "ce").input_grads(data.x, data.y)
    assert moved.tobytes() == (data.x + 0.03 * np.sign(g)).tobytes()


@pytest.mark.parametrize("p,r", [(2, 2), (2, "inf"), ("inf", 2), ("inf", "inf")])
def test_qdelta_budget_before_clamp(p, r):
    rng = np.random.default_rng(3)
    net = random_net(rng, [3, 6, 3])
    data = random_data(rng, 25, 3, 3)
    t = ThreatModel(p, r, 0.07)
    moved, _ = qdelta_displacement(net, "dlr", data, t)
    d = aggregate(norm(moved - data.x, t.r), t.p)
    if t.p == 2:
        assert abs(d - 0.07) <= 1e-9
    else:
        assert d <= 0.07 + 1e-9
    out = qdelta_displace(net, "dlr", data, t)
    assert np.array_equal(out.y, data.y) and out.x.min() >= 0 and out.x.max() <= 1


def test_first_order_gap_shrinks_faster_than_delta(suite):
    net, data = suite[0]
    t = ThreatModel(2, 2, 0.0)
    lm = LossModel(net, "ce")
    rep = upsilon(net, "ce", data, t)
    gaps = []
    for delta in (0.02, 0.01, 0.005):
        moved, _ = qdelta_displacement(net, "ce", data, t.with_delta(delta))
        gaps.append(abs(lm.values(moved, data.y).mean() - first_order_adv_loss(rep.v0, delta, rep.upsilon)))
    assert gaps[1] <= 0.5 * gaps[0] and gaps[2] <= 0.5 * gaps[1]


def test_qdelta_loss_nondecreasing_in_delta(suite):
    net, data = suite[1]
    lm = LossModel(net, "ce")
    vals = [lm.values(qdelta_displace(net, "ce", data, ThreatModel(2, 2, d)).x, data.y).mean()
            for d in np.linspace(0.0, 0.02, 6)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_upsilon_rejects_empty_dataset():
    with pytest.raises(Exception):
        upsilon(_constant_net(), "ce", LabeledDataset(np.empty((0, 2)), [], 3), ThreatModel())
