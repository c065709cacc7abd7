import math

import numpy as np
import pytest
import scipy.special
from hypothesis import given, settings
from hypothesis import strategies as st

from deeplm.convnet import NetworkArch, build_network
from deeplm.errors import ConfigError, ContractViolation
from deeplm.metrics import ks_two_sample
from deeplm.saliency import (
    ConditionClass,
    classify_conditions,
    cluster_report,
    combine_saliency,
    digamma,
    estimate_gamma_shape,
    extract_salient_window,
    gamma_fit_column,
    gamma_shape_initial,
    saliency_maps,
    smoe_scale,
    trigamma,
)

EULER = 0.5772156649015329


def test_constant_column_has_zero_scale():
    chi = np.full((8, 5), 2.5)
    assert np.all(smoe_scale(chi) == 0)
    assert np.all(smoe_scale(np.zeros((4, 3))) == 0)


def test_one_e_fixture():
    m = (1 + math.e) / 2
    expected = m * 0.5 * (math.log(m) + math.log(m / math.e))
    out = smoe_scale(np.array([[1.0], [math.e]]))[0]
    assert out == pytest.approx(expected, abs=1e-12)
    assert out == pytest.approx(0.224, abs=1e-3)


def test_scale_is_homogeneous_and_nonconstant_positive():
    chi = np.random.default_rng(0).gamma(2.0, 1.0, (16, 10))
    assert np.allclose(smoe_scale(3.0 * chi), 3.0 * smoe_scale(chi))
    assert np.all(smoe_scale(chi) > 0)


def test_negative_activation_rejected():
    with pytest.raises(ContractViolation):
        smoe_scale(np.array([[1.0, -0.1], [1.0, 2.0]]))


def test_batched_scale_matches_single():
    chi = np.random.default_rng(1).gamma(1.5, 1.0, (3, 8, 7))
    assert np.allclose(smoe_scale(chi), [smoe_scale(c) for c in chi])


def test_gamma_shape_identities():
    assert estimate_gamma_shape(EULER) == pytest.approx(1.0, abs=1e-6)
    assert estimate_gamma_shape(math.log(2) - 1 + EULER) == pytest.approx(2.0, abs=1e-6)
    assert gamma_shape_initial(1.0) == 1.25
    with pytest.raises(ValueError):
        estimate_gamma_shape(0.0)


def test_gamma_shape_solves_equation_and_decreases():
    grid = np.linspace(0.01, 10, 300)
    ks = np.array([estimate_gamma_shape(s) for s in grid])
    assert np.all(np.diff(ks) < 0)
    for s, k in zip(grid, ks):
        assert abs(math.log(k) - scipy.special.digamma(k) - s) < 1e-9


@given(st.floats(1e-3, 200.0))
@settings(max_examples=200, deadline=None)
def test_special_functions_match_scipy(x):
    assert digamma(x) == pytest.approx(float(scipy.special.digamma(x)), rel=1e-12, abs=1e-12)
    assert trigamma(x) == pytest.approx(float(scipy.special.polygamma(1, x)), rel=1e-12)


def test_gamma_fit_matches_scipy_mle():
    import scipy.stats

    rng = np.random.default_rng(2)
    for k in (0.5, 1.0, 2.0, 5.0):
        x = rng.gamma(k, 1.7, 512)
        shape, scale = gamma_fit_column(x)
        ref_shape, _, ref_scale = scipy.stats.gamma.fit(x, floc=0, method="MLE")
        assert shape == pytest.approx(ref_shape, rel=1e-4)
        assert scale == pytest.approx(ref_scale, rel=1e-4)


def test_gamma_fit_recovers_shape():
    """Repeated fits land within three asymptotic standard errors of the true shape."""
    rng = np.random.default_rng(2)
    n = 512
    for k in (0.5, 1.0, 2.0, 5.0):
        se = math.sqrt(k / (n * (k * float(scipy.special.polygamma(1, k)) - 1)))
        hits = sum(abs(gamma_fit_column(rng.gamma(k, 1.7, n))[0] - k) < 3 * se for _ in range(20))
        assert hits >= 18, (k, hits)


def test_combine_single_layer_and_range():
    m = np.array([2.0, 4.0, 3.0, 6.0])
    out = combine_saliency([m], [1.0])
    assert out.shape == (160,)
    assert np.allclose(out, np.repeat([0.0, 0.5, 0.25, 1.0], 40))
    rng = np.random.default_rng(3)
    out = combine_saliency([rng.random(80), rng.random(40), rng.random(20)])
    assert out.shape == (160,) and out.min() >= 0 and out.max() <= 1


def test_combine_identical_maps_ignore_weights():
    m = np.random.default_rng(4).random(40)
    a = combine_saliency([m, m], [1.0, 5.0])
    assert np.allclose(a, combine_saliency([m], [1.0]))


def test_combine_complementary_maps():
    out = combine_saliency([np.array([1.0, 0.0]), np.array([0.0, 1.0])], [1.0, 1.0])
    assert np.allclose(out, 0.5)


def test_combine_errors():
    with pytest.raises(ContractViolation):
        combine_saliency([np.ones(7)])
    with pytest.raises(ValueError):
        combine_saliency([np.ones(8)], [0.0])


def brute_window(x, n):
    sums = [sum(x[s:s + n]) for s in range(len(x) - n + 1)]
    best = max(sums)
    return next(s for s, v in enumerate(sums) if v == best)


def test_window_examples():
    w = extract_salient_window(np.ones(160))
    assert (w.start_pos, w.stop_pos) == (0, 54) and w.start_hours == 0.0
    assert extract_salient_window(np.arange(160.0)).start_pos == 106
    x = np.zeros(160)
    x[100] = 1.0
    assert extract_salient_window(x).start_pos == 47
    assert extract_salient_window(x).end_hours == pytest.approx(101 * 9 / 60)


@given(st.lists(st.integers(0, 4), min_size=160, max_size=160), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=100, deadline=None)
def test_window_matches_oracle_and_affine_invariance(vals, a, b):
    x = np.array(vals, float)
    w = extract_salient_window(x)
    assert w.start_pos == brute_window(list(x), 54)
    assert extract_salient_window(a * x + b).start_pos == w.start_pos


def _instance(hr, map_, sao2, rr):
    m = np.zeros((6, 1440))
    m[:5] = np.array([hr, map_, 50.0, sao2, rr])[:, None]
    return m


def test_condition_classes():
    win = extract_salient_window(np.ones(160))
    assert classify_conditions(_instance(100, 70, 97, 20), win).id == 3
    assert classify_conditions(_instance(80, 90, 98, 16), win).id == 0
    assert classify_conditions(_instance(95, 75, 90, 30), win).id == 15
    assert ConditionClass(3).label == "Hypotension, Tachycardia"
    assert ConditionClass(10).label == "Hyperventilation, Hypotension"
    assert ConditionClass(0).label == "None"


def test_condition_uses_window_only():
    m = _instance(80, 90, 98, 16)
    m[0, 600:1080] = 120.0
    win = extract_salient_window(np.r_[np.zeros(70), np.ones(54), np.zeros(36)])
    assert classify_conditions(m, win).id == 1
    m[5, win.minute_slice] = 1.0
    assert classify_conditions(m, win).imputed_only


def kolmogorov_series(x, terms=100):
    return 2 * sum((-1) ** (j - 1) * math.exp(-2 * j * j * x * x) for j in range(1, terms + 1))


def test_ks_examples():
    assert ks_two_sample([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    assert ks_two_sample([0] * 10, [15] * 10)[0] == 1.0
    with pytest.raises(ValueError):
        ks_two_sample([], [1])
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = rng.integers(0, 16, 50), rng.integers(0, 16, 50)
        d, p = ks_two_sample(a, b)
        brute = max(abs(np.mean(a <= c) - np.mean(b <= c)) for c in range(16))
        assert d == brute
        if d > 0:
            assert p == pytest.approx(min(max(kolmogorov_series(math.sqrt(25) * d), 0), 1), abs=1e-6)


def test_saliency_maps_shapes():
    net = build_network(NetworkArch(filters=8), 0)
    X = np.random.default_rng(6).normal(size=(3, 6, 160))
    per_layer, combined = saliency_maps(net, X, batch_size=2)
    assert [m.shape for m in per_layer] == [(3, 160), (3, 80), (3, 40), (3, 20), (3, 10)]
    assert combined.shape == (3, 160) and combined.min() >= 0 and combined.max() <= 1


def test_cluster_report_requires_days():
    with pytest.raises(ConfigError):
        cluster_report({3: []}, days=(3, 7))


def test_cluster_histograms_sum_to_counts():
    from deeplm.convnet.training import ScoreModel
    from deeplm.instances import ChannelScaler, Interval, TimeSeriesInstance

    rng = np.random.default_rng(7)
    net = build_network(NetworkArch(filters=4), 0)
    model = ScoreModel(net, ChannelScaler((41, 30, 10, 70, 4), (239, 160, 120, 100, 60)))
    inst = []
    for i in range(12):
        m = _instance(80 + 20 * (i % 2), 85, 97, 16 + 10 * (i % 2)) + rng.normal(0, 1, (6, 1440)) * [[1], [1], [1], [1], [1], [0]]
        inst.append(TimeSeriesInstance(i, Interval(24.0, 48.0), m, i % 2))
    rep = cluster_report({d: [(model, inst)] for d in (3, 7)}, days=(3, 7))
    h = rep.histogram
    for day in (3, 7):
        for label in (0, 1):
            assert h[(h["day"] == day) & (h["label"] == label)]["count"].sum() == 6
    assert set(rep.records.loc[rep.records["label"] == 1, "class"]) == {9}
    assert rep.ks[3]["statistic"] == 1.0
