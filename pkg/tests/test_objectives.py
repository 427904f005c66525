import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspn import tensor as T
from mspn.gradcheck import gradcheck
from mspn.objectives import (SurvLabel, UndefinedMetricError, auc, c_index, cross_entropy, hazards,
                             nll_surv, nll_surv_mean, risk_score, survival_curve)
from mspn.oracles import auc_pairs, c_index_pairs, nll_surv_direct
from mspn.params import ModelParams
from mspn.tensor import ConfigError, Tensor


def test_cross_entropy_examples():
    assert abs(cross_entropy(Tensor([[0.0, 0.0]]), 0).item() - math.log(2)) <= 1e-15
    direct = math.log1p(math.exp(-20.0))
    assert abs(cross_entropy(Tensor([[10.0, -10.0]]), 0).item() - direct) <= 1e-20
    assert cross_entropy(Tensor([[1000.0, 0.0]]), 1).item() == pytest.approx(1000.0)
    with pytest.raises(ValueError):
        cross_entropy(Tensor([[0.0, 0.0]]), 2)


def test_cross_entropy_gradcheck():
    params = ModelParams()
    z = params.add("z", np.random.default_rng(0).standard_normal((1, 4)))
    assert gradcheck(lambda: cross_entropy(z, 2), params).passed


def test_nll_surv_hand_cases():
    tiny = Tensor([1e-9] * 4)
    assert nll_surv(tiny, SurvLabel(3, True)).item() <= 1e-6
    h = Tensor([0.5, 0.5, 0.3, 0.2])
    assert abs(nll_surv(h, SurvLabel(1, False), beta=1.0).item() - 2 * math.log(2)) <= 1e-12
    assert nll_surv(h, SurvLabel(2, False), beta=0.0).item() == 0.0
    with pytest.raises(ConfigError):
        nll_surv(h, SurvLabel(0, False), beta=1.5)
    with pytest.raises(ValueError):
        SurvLabel(4, False)


def test_nll_surv_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(200):
        h = rng.uniform(0, 1, 4)
        y = SurvLabel(int(rng.integers(4)), bool(rng.integers(2)))
        beta = float(rng.uniform())
        got = nll_surv(Tensor(h), y, beta).item()
        assert abs(got - nll_surv_direct(h, y.bin, y.censored, beta)) <= 1e-12


def test_nll_surv_properties():
    rng = np.random.default_rng(2)
    for _ in range(200):
        h = rng.uniform(0, 1, 4)
        y = SurvLabel(int(rng.integers(4)), bool(rng.integers(2)))
        assert nll_surv(Tensor(h), y).item() >= 0
    h = np.array([0.2, 0.3, 0.6, 0.4])
    lower = h.copy()
    lower[2] = 0.3
    y = SurvLabel(2, False)
    assert nll_surv(Tensor(lower), y).item() > nll_surv(Tensor(h), y).item()


def test_nll_surv_mean_is_average():
    hs = [Tensor([0.1, 0.2, 0.3, 0.4]), Tensor([0.5, 0.5, 0.5, 0.5])]
    ys = [SurvLabel(1, True), SurvLabel(3, False)]
    expected = (nll_surv(hs[0], ys[0]).item() + nll_surv(hs[1], ys[1]).item()) / 2
    assert nll_surv_mean(hs, ys).item() == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("label", [SurvLabel(0, False), SurvLabel(2, False), SurvLabel(3, True)])
def test_nll_surv_gradcheck(label):
    params = ModelParams()
    z = params.add("z", np.random.default_rng(3).standard_normal((1, 4)))
    assert gradcheck(lambda: nll_surv(hazards(z), label, 0.5), params).passed


def test_survival_curve_monotone():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        s = survival_curve(rng.uniform(0, 1, 4))
        assert np.all(np.diff(s) <= 0) and np.all(s > 0)
    assert risk_score([0.1, 0.2, 0.3, 0.4]) == pytest.approx(1.0)


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


def test_c_index_examples():
    assert c_index([2.0, 1.0], [1.0, 2.0], [True, False]) == 1.0
    assert c_index([1.0] * 5, [1, 2, 3, 4, 5], [True] * 5) == 0.5
    with pytest.raises(UndefinedMetricError):
        c_index([1.0, 2.0], [1.0, 2.0], [False, False])


def test_metrics_match_pair_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(200):
        k = int(rng.integers(2, 40))
        s = rng.integers(0, 5, k).astype(float)
        y = rng.integers(0, 2, k)
        if y.min() != y.max():
            assert auc(s, y) == auc_pairs(s, y)
        t = rng.integers(0, 6, k).astype(float)
        e = rng.integers(0, 2, k).astype(bool)
        try:
            expected = c_index_pairs(s, t, e)
        except ZeroDivisionError:
            continue
        assert c_index(s, t, e) == expected


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=30, unique=True),
       st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_auc_flip_and_monotone_invariance(scores, seed):
    rng = np.random.default_rng(seed)
    s = np.array(scores, dtype=float) / 10
    y = rng.integers(0, 2, s.size)
    y[0], y[1] = 0, 1
    assert abs(auc(s, y) + auc(-s, y) - 1.0) <= 1e-12
    assert auc(np.exp(s / 50), y) == auc(s, y)
    t = rng.uniform(0, 10, s.size)
    e = rng.integers(0, 2, s.size).astype(bool)
    e[np.argmin(t)] = True
    assert c_index(s ** 3, t, e) == c_index(s, t, e)
