import math
import warnings

import numpy as np
import pytest

from wdro.data import LabeledDataset
from wdro.model import Layer, Network, clean_accuracy
from wdro.robustness import (
    ConcentrationParams, DegenerateBound, RobustnessReport, adv_accuracy, certify,
    concentration_probability, conditional_clean_losses, oos_guarantees, r_lower, r_lower_from_v,
    r_lower_n, r_upper, v_delta_n,
)
from wdro.transport import ThreatModel


def _report(**kw):
    base = dict(A=0.8, A_delta=0.6, R=0.75, R_upper=0.8, R_lower_tilde=0.7, R_lower_bar=0.7,
                R_lower=0.7, V0=2.0, C0=1.0, W0=5.0, Upsilon=1.5, V_delta_n=2.4, delta=0.1,
                threat={"p": 2, "r": 2, "delta": 0.1}, loss="ce")
    base.update(kw)
    return RobustnessReport(**base)


def test_hand_computed_bounds():
    # A = 0.75, C0 = 1, W0 = 5 -> V0 = 2
    tilde, bar, low = r_lower(1.0, 5.0, 2.0, 0.75, 0.1, 3.0, 2.3)
    assert tilde == pytest.approx(0.9)
    assert bar == pytest.approx(0.9)
    assert low == pytest.approx(0.9)
    assert r_upper(0.9, 0.8) == pytest.approx(0.8 / 0.9)
    assert r_lower_from_v(5.0, 2.0, 2.0) == pytest.approx(1.0)


def test_adv_accuracy_counts_survivors():
    net = Network((Layer(np.eye(2), np.zeros(2), "identity"),))
    data = LabeledDataset(np.array([[0.9, 0.1], [0.8, 0.3], [0.2, 0.7], [0.6, 0.5], [0.1, 0.2]]),
                          [1, 1, 2, 2, 1], 2)
    assert adv_accuracy(net, data) == pytest.approx(3 / 5)


def test_tower_identity_hand_case():
    # logits chosen so the per-sample CE is known; two right, one wrong
    net = Network((Layer(np.array([[4.0, 0.0], [0.0, 4.0]]), np.zeros(2), "identity"),))
    data = LabeledDataset(np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3]]), [1, 2, 2], 2)
    cl = conditional_clean_losses(net, "ce", data)
    assert cl.A == pytest.approx(2 / 3)
    assert cl.V0 == pytest.approx(cl.A * cl.C0 + (1 - cl.A) * cl.W0, abs=1e-12)


def test_tower_identity_on_suite(suite):
    for net, data in suite:
        for loss in ("ce", "dlr", "redlr"):
            cl = conditional_clean_losses(net, loss, data)
            assert cl.V0 == pytest.approx(cl.A * cl.C0 + (1 - cl.A) * cl.W0, abs=1e-12)


def test_degenerate_accuracy_raises():
    net = Network((Layer(np.eye(2), np.zeros(2), "identity"),))
    right = LabeledDataset(np.array([[0.9, 0.1], [0.2, 0.8]]), [1, 2], 2)
    wrong = LabeledDataset(np.array([[0.9, 0.1], [0.2, 0.8]]), [2, 1], 2)
    for data in (right, wrong):
        with pytest.raises(DegenerateBound):
            conditional_clean_losses(net, "ce", data)
    with pytest.raises(DegenerateBound):
        r_upper(0.0, 0.0)
    with pytest.raises(DegenerateBound):
        r_lower_from_v(2.0, 2.0, 1.0)


def test_w0_not_above_c0_warns():
    # a three-way near tie that is correct costs more CE than a confident two-way miss
    net = Network((Layer(np.eye(3), np.zeros(3), "identity"),))
    data = LabeledDataset(np.array([[0.50, 0.49, 0.48], [0.50, 0.51, 0.0]]), [1, 1], 3)
    with pytest.warns(RuntimeWarning):
        cl = conditional_clean_losses(net, "ce", data)
    assert cl.W0 <= cl.C0


def test_bar_bound_is_affine_in_delta():
    vals = [r_lower(1.0, 5.0, 2.0, 0.75, d, 3.0, 2.0)[1] for d in (0.0, 0.1, 0.2, 0.3)]
    assert vals[0] == pytest.approx(1.0)
    assert np.allclose(np.diff(vals), -0.1, atol=1e-12)


def test_concentration_examples():
    p = ConcentrationParams(K=1.0, n=2, N=1000, M=500, epsilon=0.5)
    assert concentration_probability(p) == pytest.approx(math.exp(-250.0))
    assert concentration_probability(p, "two-sample") == pytest.approx(2.0 * math.exp(-125.0))
    assert concentration_probability(ConcentrationParams(K=1.0, epsilon=0.0)) == 1.0
    assert concentration_probability(ConcentrationParams(K=3.0, N=1, epsilon=0.0), "two-sample") == 1.0
    with pytest.raises(ValueError):
        concentration_probability(p, "three-sample")
    with pytest.raises(ValueError):
        ConcentrationParams(K=0.0)


def test_concentration_monotone():
    vals = [concentration_probability(ConcentrationParams(n=2, N=N, epsilon=0.3)) for N in (10, 100, 1000)]
    assert vals[0] >= vals[1] >= vals[2]


def test_oos_guarantees_reduce_to_sample_values():
    rep = _report()
    g0 = oos_guarantees(rep, ConcentrationParams(epsilon=0.0, delta=0.1), lipschitz=2.0)
    assert g0[0].bound == pytest.approx(rep.A)
    g1 = oos_guarantees(rep, ConcentrationParams(epsilon=0.2, delta=0.1), lipschitz=0.0)
    assert g1[1].bound == pytest.approx(rep.V_delta_n)
    assert g1[2].bound == pytest.approx((2.4 - 2.0) / 4.0)
    for g in g1:
        assert g.confidence == pytest.approx(1.0 - g.failure_probability)
        assert g.label.startswith("asymptotic")


def test_oos_clean_bound_with_tilde_form():
    rep = _report(A=0.9)
    # bar at 2 eps = (3 - 2*0.1*0) / 3 = 1; tilde = (5 - 2.15) / 3 = 0.95
    g = oos_guarantees(rep.__class__(**{**rep.to_dict(), "Upsilon": 0.0}),
                       ConcentrationParams(epsilon=0.1), lipschitz=1.0, e_q2eps=2.15)
    assert g[0].bound == pytest.approx(0.9 * 0.95)


def test_oos_small_gap_is_noted():
    rep = _report(C0=1.0, W0=1.0005, V0=1.0001)
    g = oos_guarantees(rep, ConcentrationParams(epsilon=0.0), lipschitz=0.0)
    assert any("small denominator" in n for n in g[2].notes)
    with pytest.raises(DegenerateBound):
        oos_guarantees(_report(C0=1.0, W0=1.0), ConcentrationParams(), lipschitz=0.0)


def test_certify_ordering_and_fields(suite):
    net, data = suite[0]
    rep = certify(net, "ce", data, ThreatModel(2, 2, 0.01), steps=20)
    assert rep.A == clean_accuracy(net, data)
    assert rep.R == pytest.approx(rep.A_delta / rep.A)
    assert rep.R <= rep.R_upper + 1e-12
    assert rep.R_lower == min(rep.R_lower_tilde, rep.R_lower_bar)
    assert rep.V_delta_n >= rep.V0
    assert set(rep.to_dict()) >= {"A", "A_delta", "R", "R_upper", "R_lower", "Upsilon", "V_delta_n"}


def test_refined_lower_bound_uses_attack_loss(suite):
    net, data = suite[1]
    t = ThreatModel(2, 2, 0.01)
    cl = conditional_clean_losses(net, "ce", data)
    v = v_delta_n(net, "ce", data, t, 20)
    assert v >= cl.V0
    assert r_lower_n(net, "ce", data, t, 20) == pytest.approx((cl.W0 - v) / (cl.W0 - cl.V0))
    rep = certify(net, "ce", data, t, steps=20)
    assert r_lower_n(net, "ce", data, t, 20) <= rep.R_upper + 1e-12
    with pytest.raises(ValueError):
        r_lower_n(net, "ce", data, t, 0)


def test_zero_budget_bounds_are_one(suite):
    net, data = suite[2]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = certify(net, "ce", data, ThreatModel(2, 2, 0.0), steps=5)
    assert rep.R == 1.0 and rep.R_upper == 1.0 and rep.R_lower_bar == 1.0
    assert rep.R_lower_tilde == pytest.approx(1.0, abs=1e-12)
