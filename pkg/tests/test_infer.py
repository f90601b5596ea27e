import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from heatseg.core import haversine_km
from heatseg.infer import (
    CovarianceError,
    CovarianceEstimate,
    VcovSpec,
    confidence_intervals,
    vcov,
    vcov_cluster_twoway,
    vcov_conley,
    vcov_robust,
)
from heatseg.regress import DesignMatrix, wls_fit


def _fit(X, y, w=None, regions=None, time=None, lat=None, lon=None):
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    d = DesignMatrix(
        columns=[f"x{j}" for j in range(k)], X=X, y=np.asarray(y, dtype=float), weights=w,
        factor_names=(), levels=[], trend_names=(), trend_groups=[],
        time=np.arange(n, dtype=float) if time is None else np.asarray(time, dtype=float),
        regions=np.array(regions if regions is not None else [f"r{i}" for i in range(n)], dtype=object),
        lat=np.zeros(n) if lat is None else np.asarray(lat, float),
        lon=np.zeros(n) if lon is None else np.asarray(lon, float),
        raw_scale=np.sqrt((w[:, None] * X**2).sum(axis=0)),
    )
    return wls_fit(d)


def _panel_fit(n_r, n_t, seed, k=2, spread=3.0):
    rng = np.random.default_rng(seed)
    regions = np.repeat([f"r{i}" for i in range(n_r)], n_t)
    time = np.tile(np.arange(1, n_t + 1), n_r).astype(float)
    lat = np.repeat(30 + rng.uniform(0, spread, n_r), n_t)
    lon = np.repeat(-95 + rng.uniform(0, spread, n_r), n_t)
    X = rng.normal(size=(n_r * n_t, k))
    y = X @ np.ones(k) + rng.normal(size=n_r * n_t)
    return _fit(X, y, rng.uniform(1, 5, n_r * n_t), regions, time, lat, lon)


def _bread(f):
    return np.linalg.inv(f.X.T @ (f.weights[:, None] * f.X))


def _pair_meat(f, kernel):
    s = (f.weights * f.residuals)[:, None] * f.X
    meat = np.zeros((s.shape[1],) * 2)
    for i in range(len(s)):
        for j in range(len(s)):
            kij = kernel(i, j)
            if kij:
                meat += kij * np.outer(s[i], s[j])
    return meat


def test_robust_direct_formula():
    f = _panel_fit(5, 6, 0)
    b = _bread(f)
    expected = b @ _pair_meat(f, lambda i, j: float(i == j)) @ b
    assert_allclose(vcov_robust(f).matrix, expected, rtol=1e-12)


def test_robust_zero_residuals():
    X = np.random.default_rng(1).normal(size=(20, 2))
    f = _fit(X, X @ [1.0, 2.0])
    assert_allclose(vcov_robust(f).matrix, 0.0, atol=1e-28)


def test_robust_near_classical_when_homoskedastic():
    rng = np.random.default_rng(8)
    n = 10_000
    X = rng.normal(size=(n, 2))
    f = _fit(X, X @ [0.5, -0.5] + rng.normal(size=n))
    classical = np.diag(np.linalg.inv(X.T @ X)) * (f.residuals @ f.residuals) / (n - 2)
    assert_allclose(np.diag(vcov_robust(f).matrix), classical, rtol=0.05)


def test_twoway_singletons_equal_robust():
    f = _panel_fit(6, 5, 2)
    ids = list(range(f.n_obs))
    assert np.array_equal(vcov_cluster_twoway(f, ids, ids).matrix, vcov_robust(f).matrix)


def test_twoway_double_sum_oracle():
    f = _panel_fit(8, 6, 3)
    r, t = f.regions, f.time
    kernel = lambda i, j: float(r[i] == r[j]) + float(t[i] == t[j]) - float(r[i] == r[j] and t[i] == t[j])
    b = _bread(f)
    v = vcov_cluster_twoway(f)
    assert_allclose(v.matrix, b @ _pair_meat(f, kernel) @ b, rtol=1e-10, atol=1e-16)
    assert v.kind == "cluster"


def test_twoway_needs_two_clusters():
    f = _panel_fit(1, 6, 3)
    with pytest.raises(CovarianceError):
        vcov_cluster_twoway(f)


def test_conley_collapses_to_robust():
    f = _panel_fit(5, 4, 4, spread=10.0)
    lat, lon = f.lat, f.lon
    d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    cutoff = d[d > 0].min() * 0.99
    assert np.array_equal(vcov_conley(f, cutoff, 0).matrix, vcov_robust(f).matrix)


def test_conley_two_regions_half_cutoff():
    lat, lon = [30.0, 30.0], [-97.0, -96.0]
    d = haversine_km(30.0, -97.0, 30.0, -96.0)
    X = np.array([[1.0], [2.0]])
    f = _fit(X, [1.0, 3.0], regions=["a", "b"], time=[1.0, 1.0], lat=lat, lon=lon)
    s = f.residuals * X[:, 0]
    meat = s[0] ** 2 + s[1] ** 2 + 2 * 0.5 * s[0] * s[1]
    bread = 1.0 / (X[:, 0] @ X[:, 0])
    assert_allclose(vcov_conley(f, 2 * d, 0).matrix[0, 0], bread * meat * bread, rtol=1e-12)


def test_conley_single_region_full_window():
    f = _panel_fit(1, 15, 5)
    t = f.time
    lag = 14
    kernel = lambda i, j: max(0.0, 1 - abs(t[i] - t[j]) / (lag + 1))
    b = _bread(f)
    assert_allclose(vcov_conley(f, 1e9, lag).matrix, b @ _pair_meat(f, kernel) @ b, rtol=1e-10)


def test_conley_general_pair_sum():
    f = _panel_fit(7, 6, 6, spread=6.0)
    cutoff, lag = 400.0, 2
    lat, lon, t = f.lat, f.lon, f.time

    def kernel(i, j):
        ks = max(0.0, 1 - haversine_km(lat[i], lon[i], lat[j], lon[j]) / cutoff)
        return ks * max(0.0, 1 - abs(t[i] - t[j]) / (lag + 1))

    b = _bread(f)
    assert_allclose(vcov_conley(f, cutoff, lag).matrix, b @ _pair_meat(f, kernel) @ b, rtol=1e-10)


def test_conley_rejects_duplicate_cells():
    f = _panel_fit(3, 4, 7)
    f.time[:] = 1.0
    with pytest.raises(CovarianceError):
        vcov_conley(f)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["robust", "cluster", "conley"]))
def test_row_order_invariance(seed, kind):
    f = _panel_fit(5, 6, seed % 1000)
    perm = np.random.default_rng(seed).permutation(f.n_obs)
    g = _fit(f.X[perm], (f.X @ f.kept_beta + f.residuals)[perm], f.weights[perm],
             f.regions[perm], f.time[perm], f.lat[perm], f.lon[perm])
    spec = VcovSpec(kind, 300.0, 2)
    assert_allclose(vcov(g, spec).matrix, vcov(f, spec).matrix, rtol=1e-9, atol=1e-18)


def test_vcov_spec_validation():
    assert VcovSpec().label == "conley500km_lag4"
    with pytest.raises(ValueError):
        VcovSpec("hc3")
    with pytest.raises(ValueError):
        VcovSpec("conley", cutoff_km=0)


def _single(beta, var):
    f = _fit(np.ones((3, 1)), [beta] * 3)
    return f, CovarianceEstimate(np.array([[var]]), ["x0"], "robust")


def test_interval_example():
    f, cov = _single(0.0017, 0.0004**2)
    (ci,) = confidence_intervals(f, cov)
    assert_allclose([ci.low, ci.high], [0.000916, 0.002484], atol=5e-7)
    f, cov = _single(0.3, 0.0)
    (ci,) = confidence_intervals(f, cov)
    assert ci.low == ci.high == pytest.approx(0.3)
    f, cov = _single(0.3, -1.0)
    assert not confidence_intervals(f, cov)[0].valid


@given(st.floats(1e-6, 10), st.floats(0.5, 20))
def test_interval_width_linear_in_se(se, k):
    f, a = _single(1.0, se**2)
    _, b = _single(1.0, (k * se) ** 2)
    wa = np.diff([confidence_intervals(f, a)[0].low, confidence_intervals(f, a)[0].high])[0]
    wb = np.diff([confidence_intervals(f, b)[0].low, confidence_intervals(f, b)[0].high])[0]
    assert_allclose(wb, k * wa, rtol=1e-9)
