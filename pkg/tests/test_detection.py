from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cicda.algorithms import MethodSpec, train_method
from cicda.detection import confidence, restrict_region, restricted_bound, target_risk_lower_bound
from cicda.errors import EmptyDataset, EmptyRegion
from cicda.model import LinearModel, accuracy
from cicda.penalties import PenaltySpec
from cicda.scm import Dataset, generate_scenario_data, scenario_for_seed

# 1-D threshold classifiers: class 1 iff x > t
def threshold_model(t: float) -> LinearModel:
    return LinearModel(np.array([[-1.0], [1.0]]), np.array([t, -t]))


PROXY = threshold_model(0.5)


def test_self_comparison_bound():
    src = Dataset(np.array([[0.0], [1.0], [0.7], [0.2]]), np.array([0, 1, 0, 0]))
    rep = target_risk_lower_bound(PROXY, PROXY, src, np.array([[0.3], [0.9]]))
    assert rep.disagreement_source == 0.0 and rep.disagreement_target == 0.0
    assert rep.risk_lower_bound == pytest.approx(-0.25) and rep.risk_lower_bound <= 0.0


def test_perfect_proxy_disagreeing_on_target():
    src = Dataset(np.array([[0.0], [1.0], [0.0], [1.0]]), np.array([0, 1, 0, 1]))
    candidate = threshold_model(0.2)
    target_x = np.array([[0.3]] * 4 + [[1.0]] * 3 + [[0.0]] * 3)
    rep = target_risk_lower_bound(candidate, PROXY, src, target_x)
    assert rep.proxy_source_risk == 0.0 and rep.disagreement_source == 0.0
    assert rep.disagreement_target == pytest.approx(0.4)
    assert rep.risk_lower_bound == pytest.approx((1 - rep.candidate_source_acc) + 0.4)


def test_report_self_consistency():
    src = Dataset(np.array([[0.1], [0.9], [0.6]]), np.array([0, 1, 0]))
    rep = target_risk_lower_bound(threshold_model(0.3), PROXY, src, np.array([[0.4], [0.8]]), np.array([1, 1]))
    assert rep.accuracy_upper_bound == 1 - rep.risk_lower_bound
    assert rep.actual_target_acc == 1.0


def test_empty_inputs():
    src = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=int))
    with pytest.raises(EmptyDataset):
        target_risk_lower_bound(PROXY, PROXY, src, np.zeros((2, 1)))


def _proxy_with_probabilities(probs):
    """Binary proxy whose maximum softmax output at x_i equals probs[i] (all >= 0.5)."""
    proxy = LinearModel(np.array([[0.0], [1.0]]), np.zeros(2))
    x = np.array([[math.log(p / (1 - p))] for p in probs])
    return proxy, x


def test_restrict_region_hand_quantile():
    proxy, x = _proxy_with_probabilities([0.5, 0.6, 0.9, 0.95])
    assert np.allclose(confidence(proxy, x), [0.5, 0.6, 0.9, 0.95])
    src = Dataset(x, np.array([0, 1, 1, 1]))
    sub, mask, q = restrict_region(proxy, src, x, 0.5)
    assert q == pytest.approx(0.6)
    assert mask.tolist() == [False, True, True, True] and len(sub) == 3


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_restrict_region_keeps_at_least_the_quantile_share(seed, alpha):
    rng = np.random.default_rng(seed)
    proxy = LinearModel(rng.standard_normal((2, 2)), rng.standard_normal(2))
    tx = rng.standard_normal((40, 2))
    src = Dataset(np.vstack([tx, rng.standard_normal((10, 2))]), rng.integers(0, 2, 50))
    _, mask, _ = restrict_region(proxy, src, tx, alpha)
    assert mask.sum() >= math.ceil((1 - alpha) * 40)
    if alpha == 0.0:
        assert mask.all()


@given(st.integers(0, 2**32 - 1))
def test_region_fraction_monotone_in_alpha(seed):
    rng = np.random.default_rng(seed)
    proxy = LinearModel(rng.standard_normal((3, 2)), rng.standard_normal(3))
    tx = rng.standard_normal((30, 2))
    src = Dataset(tx.copy(), rng.integers(0, 3, 30))
    cand = LinearModel(rng.standard_normal((3, 2)), rng.standard_normal(3))
    fractions = [restricted_bound(cand, proxy, src, tx, a).region_fraction_target for a in (0.0, 0.25, 0.5, 0.75)]
    assert all(f1 >= f2 for f1, f2 in zip(fractions, fractions[1:]))


def test_alpha_zero_matches_unrestricted():
    rng = np.random.default_rng(1)
    proxy, cand = (LinearModel(rng.standard_normal((2, 3)), rng.standard_normal(2)) for _ in range(2))
    src = Dataset(rng.standard_normal((20, 3)), rng.integers(0, 2, 20))
    tx, ty = rng.standard_normal((15, 3)), rng.integers(0, 2, 15)
    full = target_risk_lower_bound(cand, proxy, src, tx, ty)
    region = restricted_bound(cand, proxy, src, tx, 0.0, ty)
    for key in ("risk_lower_bound", "accuracy_upper_bound", "disagreement_source", "disagreement_target",
                "actual_target_acc"):
        assert getattr(full, key) == getattr(region, key)
    assert region.region_fraction_target == 1.0 and region.region_alpha == 0.0


def test_restricted_limit_case_perfect_region_proxy():
    proxy, x = _proxy_with_probabilities([0.55, 0.6, 0.9, 0.95, 0.97])
    # labels agree with the proxy everywhere in the confident region
    src = Dataset(x, np.array([0, 1, 1, 1, 1]))
    rep = restricted_bound(proxy, proxy, src, x, 0.5)
    assert rep.proxy_source_risk == 0.0
    assert rep.risk_lower_bound == 0.0 and rep.accuracy_upper_bound == 1.0


def test_empty_region():
    proxy, tx = _proxy_with_probabilities([0.9, 0.95, 0.99])
    _, sx = _proxy_with_probabilities([0.5, 0.55])
    with pytest.raises(EmptyRegion):
        restrict_region(proxy, Dataset(sx, np.array([0, 1])), tx, 0.5)
    with pytest.raises(ValueError):
        restrict_region(proxy, Dataset(sx, np.array([0, 1])), tx, 1.0)


def test_scm3_dip_bound_valid_on_every_seed():
    for seed in range(10):
        sc = scenario_for_seed("SCM-III", seed)
        data = generate_scenario_data(sc, seed)
        dip = train_method(MethodSpec("DIP", PenaltySpec("mean", lam=100.0)), sc, data, seed)
        proxy = train_method(MethodSpec("CIP", PenaltySpec("mean", lam=1.0)), sc, data, seed).model
        target = data[-1]
        rep = target_risk_lower_bound(dip.model, proxy, data[sc.dip_source_index - 1], target.x, target.y)
        assert rep.actual_target_acc == pytest.approx(accuracy(dip.model, target), abs=1e-12)
        assert rep.accuracy_upper_bound >= rep.actual_target_acc - 0.03
