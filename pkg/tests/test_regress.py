import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from heatseg.regress import (
    FACTOR_SPECS,
    DesignMatrix,
    build_design,
    demean,
    fit,
    fit_subsamples,
    median_split_indicator,
    population_quartiles,
    weighted_median,
    wls_fit,
)
from heatseg.synth import DgpParams, generate_dgp, oracle_ols_dense


def _design(X, y, w=None, levels=(), names=None, time=None, regions=None):
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    levels = [np.asarray(g) for g in levels]
    return DesignMatrix(
        columns=names or [f"x{j}" for j in range(k)], X=X, y=np.asarray(y, dtype=float), weights=w,
        factor_names=tuple(f"f{i}" for i in range(len(levels))), levels=levels,
        trend_names=(), trend_groups=[],
        time=np.arange(n, dtype=float) if time is None else time,
        regions=np.array(regions if regions is not None else ["r"] * n, dtype=object),
        lat=np.zeros(n), lon=np.zeros(n), raw_scale=np.sqrt((w[:, None] * X**2).sum(axis=0)),
    )


@pytest.fixture(scope="module")
def dgp():
    return generate_dgp(DgpParams(n_regions=12, n_weeks=30, seed=4))


def test_design_column_counts(dgp):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(dgp.vi_panel, dgp.exposure, dgp.regions)
        assert d.X.shape[1] == 11
        assert "tmax_20_25" not in d.columns and "precip_0" not in d.columns
        split = {c: ("above" if i % 2 else "below") for i, c in enumerate(dgp.regions)}
        d2 = build_design(dgp.vi_panel, dgp.exposure, dgp.regions, split=split)
    assert d2.X.shape[1] == 22
    assert_allclose(d2.X[:, :11] + d2.X[:, 11:], d.X)


def test_reference_week_row_is_zero(dgp):
    ex = dgp.exposure
    ex.temp[0, 0] = 0
    ex.temp[0, 0, ex.spec.reference_temp_index] = 7
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(dgp.vi_panel, ex, dgp.regions)
    assert (d.X[0, :8] == 0).all()


def test_demean_single_level_grand_mean():
    w = np.array([1.0, 2.0, 3.0])
    d = demean(_design([[1.0], [2.0], [4.0]], [3.0, 5.0, 9.0], w, levels=[np.zeros(3, int)]))
    assert_allclose(d.y, [3, 5, 9] - np.average([3, 5, 9], weights=w), atol=1e-14)


def test_demean_two_way_balanced_closed_form():
    y = np.array([1.0, 4.0, 2.0, 7.0])   # rows (i, t): (0,0),(0,1),(1,0),(1,1)
    i, t = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1])
    d = demean(_design(np.ones((4, 1)), y, levels=[i, t]))
    Y = y.reshape(2, 2)
    closed = Y - Y.mean(axis=1, keepdims=True) - Y.mean(axis=0, keepdims=True) + Y.mean()
    assert_allclose(d.y, closed.ravel(), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_demean_zero_within_means_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = 60
    levels = [rng.integers(0, 5, n), rng.integers(0, 7, n)]
    w = rng.uniform(0.5, 3, n)
    d = demean(_design(rng.normal(size=(n, 2)), rng.normal(size=n), w, levels=levels))
    for g in levels:
        for lev in np.unique(g):
            m = g == lev
            assert abs(np.dot(w[m], d.y[m])) / w[m].sum() <= 1e-9
            assert (np.abs(w[m] @ d.X[m]) / w[m].sum() <= 1e-9).all()
    again = demean(d.__class__(**{**d.__dict__, "demeaned": False}))
    assert_allclose(again.y, d.y, atol=1e-9)


def test_wls_exact_recovery_and_equal_weights():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 2))
    y = X @ [0.3, -1.2]
    f = wls_fit(_design(X, y))
    assert_allclose(f.beta, [0.3, -1.2], atol=1e-12)
    y2 = y + rng.normal(size=50)
    ols = np.linalg.lstsq(X, y2, rcond=None)[0]
    assert_allclose(wls_fit(_design(X, y2, np.full(50, 4.0))).beta, ols, rtol=1e-12)


def test_wls_against_dense_dummies(dgp):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = DgpParams(n_regions=10, n_weeks=20, seed=7)
        g = generate_dgp(p)
        d = build_design(g.vi_panel, g.exposure, g.regions)
    f = fit(d)
    beta, dropped = oracle_ols_dense(d)
    assert dropped == f.dropped
    ok = ~np.isnan(beta)
    assert_allclose(f.beta[ok], beta[ok], rtol=0, atol=1e-8)


def test_noise_free_recovery():
    g = generate_dgp(DgpParams(n_regions=30, n_weeks=60, noise_sd=0.0, seed=2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(g.vi_panel, g.exposure, g.regions)
    f = fit(d, tol=1e-13)
    truth = {**g.beta_true, **g.rho_true}
    assert set(truth) == set(f.columns)
    for col, b in truth.items():
        assert abs(f.coef(col) - b) <= 1e-10


def test_collinear_duplicate_dropped():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 1))
    d = _design(np.hstack([x, 2 * x]), x[:, 0] + rng.normal(size=40), names=["a", "b"])
    f = wls_fit(d)
    assert f.dropped == ["b"] and np.isnan(f.beta[1])
    assert oracle_ols_dense(d)[1] == ["b"]


def test_state_trend_spec_runs(dgp):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(dgp.vi_panel, dgp.exposure, dgp.regions, FACTOR_SPECS["state_trend"])
    f = fit(d)
    beta, _ = oracle_ols_dense(d)
    ok = ~np.isnan(beta)
    assert_allclose(f.beta[ok], beta[ok], atol=1e-8)


def test_fit_subsamples(dgp):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        d = build_design(dgp.vi_panel, dgp.exposure, dgp.regions)
        whole, _ = fit_subsamples(d, {c: "all" for c in dgp.regions})
        assert_allclose(whole["all"].beta, fit(d).beta, equal_nan=True, rtol=0, atol=0)
        parts = population_quartiles(list(dgp.regions.values()))
        fits, flagged = fit_subsamples(d, parts)
        assert not flagged
        for cls, f in fits.items():
            mask = np.array([parts[r] == cls for r in d.regions])
            assert_allclose(f.beta, fit(d.subset(mask)).beta, equal_nan=True, atol=1e-14)
        lonely = {c: ("solo" if i == 0 else "rest") for i, c in enumerate(sorted(dgp.regions))}
        fits, flagged = fit_subsamples(d, lonely)
    assert "solo" in flagged and "rest" in fits


def test_population_quartiles(dgp):
    q = population_quartiles(list(dgp.regions.values()))
    assert sorted(set(q.values())) == ["q1", "q2", "q3", "q4"]
    pops = {c: dgp.regions[c].population for c in q}
    assert max(pops[c] for c in q if q[c] == "q1") <= min(pops[c] for c in q if q[c] == "q4")


def test_median_split_rule():
    # cumulative weights 1, 2, 4 reach half of 4 at value 2
    assert weighted_median([1, 2, 3], [1, 1, 2]) == 2.0
    assert median_split_indicator({"a": 1, "b": 2, "c": 3}, {"a": 1, "b": 1, "c": 2}) == \
        {"a": "below", "b": "below", "c": "above"}
    assert set(median_split_indicator({"a": 5, "b": 5}, {"a": 1, "b": 3}).values()) == {"below"}


@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(1, 20)), min_size=1, max_size=15))
def test_weighted_median_scan(pairs):
    values, weights = zip(*pairs)
    total, acc = sum(weights), 0
    for v, w in sorted(pairs, key=lambda p: p[0]):
        acc += w
        if 2 * acc >= total:
            expected = v
            break
    assert weighted_median(values, weights) == expected
