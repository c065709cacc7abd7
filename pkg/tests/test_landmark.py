import warnings

import numpy as np
import pandas as pd
import pytest

from deeplm.errors import BootstrapError, ConfigError, DataError, UndefinedMetricError
from deeplm.landmark import (
    LandmarkGrid,
    SuperDataset,
    auroc_global,
    bootstrap_ci,
    breslow_baseline,
    build_super_dataset,
    cif_curves,
    covariate_impact,
    expand_design,
    fit_competing_risks,
    fit_landmark_supermodel,
    global_auroc_of,
    landmark_aurocs,
    partial_loglik,
    predict_cif,
    predict_rows,
    predict_survival,
    split_patients,
)
from deeplm.landmark.cox import _prepare
from deeplm.metrics import auroc

from conftest import make_patient

ONE = LandmarkGrid(s0=48.0, s1=48.0, n=1, w=24.0)


def frame_sd(time, status, grid=ONE, k=None, **covs):
    n = len(time)
    k = np.zeros(n, int) if k is None else np.asarray(k)
    f = pd.DataFrame({
        "patient_id": np.arange(n), "k": k, "t_lm": grid.times[k],
        "time": np.asarray(time, float), "status": np.asarray(status, int),
    })
    for name, v in covs.items():
        f[name] = np.asarray(v, float)
    return SuperDataset(f, grid, list(covs))


def synthetic_sd(n=300, seed=0, grid=LandmarkGrid(48, 96, 3, 24.0), beta=(0.8, -0.5)):
    """Rows at three landmarks with exponential cause-specific hazards."""
    rng = np.random.default_rng(seed)
    k = rng.integers(0, grid.n, n)
    x = rng.normal(size=(n, 2))
    t_lm = grid.times[k]
    h1 = 0.02 * np.exp(x @ np.asarray(beta))
    h2 = 0.03 * np.ones(n)
    t = rng.exponential(1 / (h1 + h2))
    cause = np.where(rng.random(n) < h1 / (h1 + h2), 1, 2)
    time = np.round(t_lm + np.minimum(t, grid.w), 1)
    status = np.where(t < grid.w, cause, 0)
    return frame_sd(time, status, grid, k, x1=x[:, 0], x2=x[:, 1])


def exact_loglik(beta, z, time, status):
    """Partial log-likelihood of one stratum without ties, by explicit sums."""
    ll = 0.0
    for i in range(len(time)):
        if status[i]:
            at_risk = time >= time[i]
            ll += beta * z[i] - np.log(np.sum(np.exp(beta * z[at_risk])))
    return ll


def grid_search(f, lo, hi, rounds=8, n=201):
    for _ in range(rounds):
        xs = np.linspace(lo, hi, n)
        i = int(np.argmax([f(x) for x in xs]))
        step = xs[1] - xs[0]
        lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, n - 1)]
    return xs[i]


def aalen_johansen(time, status, horizon_times):
    """Cause-specific cumulative incidence by the nonparametric product-limit route."""
    S, F1, F2 = 1.0, 0.0, 0.0
    out = {}
    for t in sorted(set(time[status > 0])):
        n = np.sum(time >= t)
        d1 = np.sum((time == t) & (status == 1))
        d2 = np.sum((time == t) & (status == 2))
        F1 += S * d1 / n
        F2 += S * d2 / n
        S *= 1 - (d1 + d2) / n
        out[t] = (S, F1, F2)
    return out


# super-dataset ---------------------------------------------------------------

def test_short_stay_appears_once():
    sd = build_super_dataset([make_patient(0, end_time=50.0, cause=2)])
    f = sd.frame
    assert len(f) == 1 and f.iloc[0][["t_lm", "time", "status"]].tolist() == [48.0, 50.0, 2]


def test_infection_exits_the_risk_set():
    p = make_patient(0, end_time=150.0, cause=1, infection_time=100.0)
    f = build_super_dataset([p]).frame
    row = f[f["t_lm"] == 96.0].iloc[0]
    assert (row["time"], row["status"]) == (100.0, 1)
    assert f["t_lm"].max() == 96.0


def test_long_stay_is_censored_administratively():
    f = build_super_dataset([make_patient(0, end_time=300.0, cause=2)]).frame
    assert len(f) == 25
    quiet = f[f["t_lm"] + 24 < 300]
    assert np.all(quiet["status"] == 0) and np.allclose(quiet["time"], quiet["t_lm"] + 24)
    assert f.iloc[-1]["status"] == 0  # t_lm = 240 window ends at 264


def test_risk_set_monotone(small_cohort):
    f = build_super_dataset(small_cohort).frame
    for _, g in f.groupby("patient_id"):
        assert np.array_equal(g["k"].to_numpy(), np.arange(len(g)))
        assert np.all(g["t_lm"] < g["time"])
        ev = g[g["status"] > 0]
        assert ev["time"].nunique() <= 1 and np.all(ev["t_lm"] >= ev["time"] - 24)


def test_unresolved_score_is_listed():
    p = make_patient(3, end_time=100.0)
    with pytest.raises(DataError, match=r"\(3, 48\)"):
        build_super_dataset([p], {3: [(72.0, 0.5)]})


def test_score_resolution_uses_latest_window():
    p = make_patient(0, end_time=100.0)
    f = build_super_dataset([p], {0: [(24.0, 0.1), (48.0, 0.2), (56.0, 0.3), (72.0, 0.4)]}).frame
    assert f["z_cnn"].tolist() == [0.2, 0.3, 0.3, 0.4, 0.4, 0.4, 0.4]


# design ---------------------------------------------------------------------

def test_design_columns_and_constant_exclusion():
    sd = synthetic_sd(50)
    sd.frame["flat"] = 1.0
    with pytest.warns(UserWarning, match="flat"):
        d = expand_design(sd, ["x1", "flat"])
    assert d.column_names == ["x1", "x1*t", "x1*t^2"] and d.X.shape == (50, 3)
    t = sd.frame["t_lm"].to_numpy() / 24
    assert np.allclose(d.X[:, 2], sd.frame["x1"] * t**2)
    with pytest.raises(ConfigError):
        expand_design(sd, ["nope"])


def test_single_landmark_design_drops_interactions():
    sd = frame_sd([50, 51, 52], [1, 0, 2], z=[0.1, 0.4, -1])
    assert expand_design(sd).column_names == ["z"]


def test_beta_reassembly():
    fit = fit_landmark_supermodel(synthetic_sd(400, 1), 1)
    Z = np.array([[0.3, -1.2]])
    for t_lm in (48.0, 72.0, 96.0):
        assert fit.linear_predictor(Z, t_lm)[0] == pytest.approx(float(fit.beta_at(t_lm) @ Z[0]), abs=1e-12)


def test_time_constant_effect_has_small_interactions():
    fit = fit_landmark_supermodel(synthetic_sd(3000, 2), 1)
    b = fit.design.triples(fit.beta)
    se = fit.design.triples(fit.se)
    assert np.all(np.abs(b[:, 1:]) < 2 * se[:, 1:] + 1e-12) or np.mean(np.abs(b[:, 1:]) < 2 * se[:, 1:]) >= 0.75


# Cox fit --------------------------------------------------------------------

def test_five_subject_fit_matches_grid_search():
    time = np.array([49.0, 51.5, 53.0, 60.0, 70.0])
    status = np.array([1, 1, 0, 1, 0])
    z = np.array([1.2, -0.3, 0.8, 0.5, -1.0])
    fit = fit_landmark_supermodel(frame_sd(time, status, z=z), 1)
    oracle = grid_search(lambda b: exact_loglik(b, z, time, status), -10, 10)
    assert abs(fit.beta[0] - oracle) < 1e-6
    assert fit.loglik == pytest.approx(exact_loglik(fit.beta[0], z, time, status), abs=1e-12)


def _fixture_30():
    rng = np.random.default_rng(4)
    time = rng.choice([49.0, 50.0, 52.0, 55.0, 60.0, 66.0], 30)  # ties on purpose
    event = rng.random(30) < 0.6
    strata = np.repeat([0, 1], 15)
    X = rng.normal(size=(30, 3))
    return X, time, event, strata


def test_score_and_hessian_match_finite_differences():
    X, time, event, strata = _fixture_30()
    sdata = _prepare(time, event, strata)
    beta = np.array([0.3, -0.2, 0.5])
    _, g, H = partial_loglik(beta, X, sdata)
    h = 1e-6
    g_fd = np.zeros(3)
    H_fd = np.zeros((3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        g_fd[i] = (partial_loglik(beta + e, X, sdata)[0] - partial_loglik(beta - e, X, sdata)[0]) / (2 * h)
        H_fd[i] = (partial_loglik(beta + e, X, sdata)[1] - partial_loglik(beta - e, X, sdata)[1]) / (2 * h)
    assert np.max(np.abs(g - g_fd)) / np.max(np.abs(g_fd)) < 1e-5
    assert np.max(np.abs(H - H_fd)) / np.max(np.abs(H_fd)) < 1e-5


def test_score_at_zero_closed_form():
    X, time, event, strata = _fixture_30()
    _, g, _ = partial_loglik(np.zeros(3), X, _prepare(time, event, strata))
    expected = np.zeros(3)
    for i in np.flatnonzero(event):
        risk = (strata == strata[i]) & (time >= time[i])
        expected += X[i] - X[risk].mean(axis=0)
    assert np.allclose(g, expected, atol=1e-12)


def test_zero_covariates_give_null_fit():
    sd = synthetic_sd(80, 3)
    sd.frame["zero_a"] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        fit = fit_landmark_supermodel(sd, 1, ["zero_a"])
    assert fit.beta.size == 0 and fit.loglik == fit.loglik_null


def test_fit_reaches_stationary_point():
    fit = fit_landmark_supermodel(synthetic_sd(500, 5), 2)
    assert fit.converged and fit.grad_max < 1e-6


def test_fit_requires_events_and_full_rank():
    sd = frame_sd([50, 60], [0, 2], z=[0, 1])
    with pytest.raises(DataError):
        fit_landmark_supermodel(sd, 1)
    sd = frame_sd([50, 60, 70], [1, 2, 1], a=[0, 1, 2], b=[0, 2, 4])
    with pytest.raises(DataError, match="rank"):
        fit_landmark_supermodel(sd, 1)


def test_scale_equivariance():
    sd = synthetic_sd(400, 6)
    scaled = SuperDataset(sd.frame.copy(), sd.grid, sd.covariates)
    scaled.frame["x1"] *= 10.0
    m, ms = fit_competing_risks(sd), fit_competing_risks(scaled)
    b = m.causes[1].coefficient_triples()["x1"]
    bs = ms.causes[1].coefficient_triples()["x1"]
    assert np.allclose(np.array(bs) * 10, b, atol=1e-6)
    assert np.allclose(predict_rows(m, sd), predict_rows(ms, scaled), atol=1e-8)


# baseline and plug-in predictions --------------------------------------------

def test_breslow_null_is_nelson_aalen():
    sd = synthetic_sd(200, 7)
    fit = fit_landmark_supermodel(sd, 1, [])
    f = sd.frame
    for k, (times, inc) in fit.baseline.items():
        g = f[f["k"] == k]
        for t, d in zip(times, inc):
            n_risk = np.sum(g["time"] >= t)
            d1 = np.sum((g["time"] == t) & (g["status"] == 1))
            assert d == pytest.approx(d1 / n_risk, abs=1e-15)


def test_breslow_increments_reproduce_event_counts():
    sd = synthetic_sd(300, 8)
    fit = fit_landmark_supermodel(sd, 2)
    f = sd.frame
    lp = fit.design.transform(f[fit.covariates].to_numpy(), f["t_lm"].to_numpy()) @ fit.beta
    for k, (times, inc) in breslow_baseline(fit, sd).items():
        sel = (f["k"] == k).to_numpy()
        total = sum(d * np.exp(lp[sel & (f["time"].to_numpy() >= t)]).sum() for t, d in zip(times, inc))
        assert total == pytest.approx(np.sum(f["status"][sel] == 2), rel=1e-12)


def test_stratum_without_events_has_no_increments():
    grid = LandmarkGrid(48, 72, 2, 24.0)
    sd = frame_sd([50, 55, 80, 90], [1, 0, 0, 0], grid, k=[0, 0, 1, 1], z=[0.1, 0.2, 0.3, 0.5])
    times, inc = fit_landmark_supermodel(sd, 1, []).baseline[1]
    assert len(times) == len(inc) == 0


def test_null_plug_in_matches_aalen_johansen():
    rng = np.random.default_rng(9)
    time = np.round(48 + rng.uniform(0, 24, 120), 0)
    status = rng.choice([0, 1, 2], 120, p=[0.4, 0.3, 0.3])
    sd = frame_sd(time, status)
    model = fit_competing_risks(sd, [])
    times, S, F = cif_curves(model, np.zeros((1, 0)), 48.0)
    aj = aalen_johansen(time, status, times)
    assert np.array_equal(times, sorted(aj))
    for i, t in enumerate(times):
        s, f1, f2 = aj[t]
        assert abs(S[0, i] - s) < 1e-10 and abs(F[1][0, i] - f1) < 1e-10 and abs(F[2][0, i] - f2) < 1e-10


def test_plug_in_additivity_and_monotonicity():
    sd = synthetic_sd(400, 10)
    model = fit_competing_risks(sd)
    Z = np.random.default_rng(0).normal(size=(20, 2))
    for t_lm in sd.grid.times:
        times, S, F = cif_curves(model, Z, t_lm)
        assert np.max(np.abs(S + F[1] + F[2] - 1)) < 1e-12
        assert np.all(np.diff(S, axis=1) <= 1e-15)
        assert np.all(np.diff(F[1], axis=1) >= -1e-15)


def test_prediction_window_edges():
    sd = synthetic_sd(200, 11)
    model = fit_competing_risks(sd)
    z = np.array([0.2, 0.1])
    assert predict_survival(model, z, 72.0, 72.0) == 1.0
    assert predict_cif(model, z, 1, 72.0, 72.0) == 0.0
    with pytest.raises(ValueError):
        predict_cif(model, z, 1, 72.0, 97.0)
    with pytest.raises(ValueError):
        predict_survival(model, z, 70.0, 80.0)
    end = predict_cif(model, z, 1, 72.0, 96.0)
    rows = SuperDataset(pd.DataFrame({"patient_id": [0], "k": [1], "t_lm": [72.0], "time": [96.0], "status": [0], "x1": [0.2], "x2": [0.1]}), sd.grid, sd.covariates)
    assert predict_rows(model, rows)[0] == pytest.approx(end, abs=1e-15)


# AUROC and bootstrap --------------------------------------------------------

def test_global_auroc_examples():
    assert auroc_global([0.8, 0.6], [100, 50]) == pytest.approx(0.7333333333333333, abs=1e-12)
    assert auroc_global([0.7, 0.5, 0.9], [10, 10, 10]) == pytest.approx(0.7, abs=1e-15)
    assert auroc_global([0.8, np.nan], [100, 50]) == 0.8
    with pytest.raises(UndefinedMetricError):
        auroc_global([np.nan], [10])


def test_single_landmark_global_is_plain_auroc():
    rng = np.random.default_rng(0)
    status = rng.choice([0, 1, 2], 60)
    sd = frame_sd(np.full(60, 60.0), status)
    pred = rng.random(60)
    assert global_auroc_of(sd, pred) == auroc(pred, status == 1)


def test_global_between_landmark_extremes():
    sd = synthetic_sd(600, 12)
    pred = predict_rows(fit_competing_risks(sd), sd)
    a, r = landmark_aurocs(sd, pred)
    g = auroc_global(a, r)
    assert np.nanmin(a) <= g <= np.nanmax(a)
    assert np.array_equal(r, sd.risk_set_sizes())


def test_bootstrap_determinism_and_constant():
    units = list(range(40))
    stat = lambda u: np.mean(u)  # noqa: E731
    a, b = bootstrap_ci(stat, units, B=60, seed=3), bootstrap_ci(stat, units, B=60, seed=3)
    assert (a.lo, a.hi) == (b.lo, b.hi)
    c = bootstrap_ci(lambda u: 2.5, units, B=50)
    assert c.lo == c.hi == 2.5
    with pytest.raises(ValueError):
        bootstrap_ci(stat, units, B=10)


def test_bootstrap_failure_rate():
    from deeplm.errors import DeepLMError

    def flaky(u):
        if u[0] % 2:
            raise DeepLMError("boom")
        return 0.0

    with pytest.raises(BootstrapError):
        bootstrap_ci(flaky, list(range(10)), B=100)


@pytest.mark.slow
def test_bootstrap_coverage_of_null_auroc():
    """The percentile interval for a null AUROC covers 0.5 at a rate of at least 90%.

    400 replications keep the binomial noise of the count well below the
    margin between the nominal level and the threshold.
    """
    rng = np.random.default_rng(13)
    hits = 0
    for rep in range(400):
        y = rng.integers(0, 2, 150)
        s = rng.random(150)
        data = list(zip(s, y))

        def stat(units):
            ss, yy = zip(*units)
            return auroc(ss, yy)

        hits += bootstrap_ci(stat, data, B=200, seed=rep).contains(0.5)
    assert hits >= 360


def test_split_patients():
    ids = np.arange(100)
    ev = ids < 20
    (test,) = split_patients(ids, 1, seed=0, test_fraction=0.3, events=ev)
    assert len(test) == 30 and np.sum(test < 20) == 6
    folds = split_patients(ids, 5, seed=0, events=ev)
    assert np.array_equal(np.sort(np.concatenate(folds)), ids)


# covariate impact ------------------------------------------------------------

def test_covariate_impact():
    sd = synthetic_sd(1500, 14, beta=(1.2, 0.0))
    rng = np.random.default_rng(14)
    sd.frame["noise"] = rng.normal(size=len(sd))
    m = covariate_impact(sd, ["x1", "x2", "noise"])
    assert m.shape == (3, sd.grid.n)
    assert m.loc["x1"].mean() > 0
    assert np.all(np.abs(m.loc["noise"]) <= 0.02)


def test_separated_data_warns_and_caps():
    from deeplm.landmark import MonotoneLikelihoodWarning

    # every event has the largest covariate in its risk set
    time = np.array([49.0, 50.0, 51.0, 52.0, 53.0, 54.0])
    status = np.array([1, 1, 1, 0, 0, 0])
    z = np.array([3.0, 2.0, 1.0, 0.0, -1.0, -2.0])
    with pytest.warns(MonotoneLikelihoodWarning):
        fit = fit_landmark_supermodel(frame_sd(time, status, z=z), 1)
    assert fit.beta[0] > 5 and abs(fit.beta[0]) <= 50.0 and fit.notes
