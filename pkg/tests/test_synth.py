import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from heatseg.ingest import load_bundle, validate_bundle
from heatseg.isolation import region_week_isolation
from heatseg.regress import DesignMatrix
from heatseg.synth import (
    CityParams,
    DatasetParams,
    DgpParams,
    OracleRefused,
    generate_city,
    generate_dataset,
    generate_dgp,
    oracle_ols_dense,
    oracle_vi,
    rng_for,
)


def test_rng_is_philox_and_seeded():
    a, b = rng_for(3), rng_for(3)
    assert isinstance(a.bit_generator, np.random.Philox)
    assert_array_equal(a.integers(0, 1 << 30, 10), b.integers(0, 1 << 30, 10))


def test_city_params_validation():
    with pytest.raises(ValueError):
        CityParams(segregation_dial=1.5)
    with pytest.raises(ValueError):
        CityParams(white_share=-0.1)


def test_city_is_deterministic():
    p = CityParams(seed=21, n_weeks=2)
    assert generate_city(p).visits == generate_city(p).visits
    assert generate_city(p).visits != generate_city(CityParams(seed=22, n_weeks=2)).visits


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 0.5))
def test_city_validates_clean(seed, dial, outside):
    bundle = generate_city(CityParams(seed=seed, segregation_dial=dial, outside_visitor_rate=outside,
                                      unresolved_rate=0.1, visits_scale=300))
    report = validate_bundle(bundle)
    assert report.issues == [] and not report.unknown_cbgs


def test_full_segregation():
    bundle = generate_city(CityParams(segregation_dial=1.0, seed=5))
    assert oracle_vi(bundle, "90001", 1) == 1.0
    assert region_week_isolation(bundle, "90001", 1) == 1.0


def test_single_poi_city():
    bundle = generate_city(CityParams(n_pois=1, seed=6, outside_visitor_rate=0.2))
    assert oracle_vi(bundle, "90001", 1) == 0.0


def test_dial_zero_near_zero():
    bundle = generate_city(CityParams(segregation_dial=0.0, visits_scale=1e4, seed=7))
    assert abs(region_week_isolation(bundle, "90001", 1)) <= 0.02


def test_oracle_refuses_large():
    bundle = generate_city(CityParams(visits_scale=5000, seed=1))
    with pytest.raises(OracleRefused):
        oracle_vi(bundle, "90001", 1, max_units=100)


def test_dense_oracle_without_factors_is_plain_wls():
    rng = np.random.default_rng(4)
    n = 30
    X, w = rng.normal(size=(n, 2)), rng.uniform(1, 3, n)
    y = X @ [1.0, -2.0] + 0.5 + rng.normal(size=n)
    d = DesignMatrix(["a", "b"], X, y, w, (), [], (), [], np.arange(n, dtype=float),
                     np.array(["r"] * n, dtype=object), np.zeros(n), np.zeros(n), np.ones(2))
    beta, dropped = oracle_ols_dense(d)
    sw = np.sqrt(w)
    direct = np.linalg.lstsq(sw[:, None] * np.column_stack([np.ones(n), X]), sw * y, rcond=None)[0]
    assert dropped == []
    assert_allclose(beta, direct[1:], rtol=1e-10)
    with pytest.raises(OracleRefused):
        oracle_ols_dense(d, max_obs=10)


def test_dgp_deterministic():
    a = generate_dgp(DgpParams(n_regions=6, n_weeks=10, seed=9))
    b = generate_dgp(DgpParams(n_regions=6, n_weeks=10, seed=9))
    assert_array_equal(a.vi_panel.values, b.vi_panel.values)
    assert_array_equal(a.exposure.temp, b.exposure.temp)
    assert (a.exposure.temp.sum(axis=-1) == 7).all()
    with pytest.raises(ValueError):
        generate_dgp(DgpParams(n_regions=6, n_weeks=10, beta_true=(0.0,)))


def test_dataset_round_trip(tmp_path):
    paths = generate_dataset(DatasetParams(n_regions=3, n_weeks=4, pois_per_region=3, cbgs_per_region=4,
                                           visits_scale=100), tmp_path)
    assert paths["config"].exists() and "[scenarios]" in paths["config"].read_text()
    bundle = load_bundle(tmp_path)
    assert not bundle.parse_errors
    assert validate_bundle(bundle).issues == []
    assert len(bundle.regions) == 3 and len(bundle.weeks()) == 4
