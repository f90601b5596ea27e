import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from conftest import WINDOW
from heatseg.isolation import IsolationPanel, build_isolation_panel
from heatseg.report import (
    ConfigError,
    MissingInput,
    load_config,
    loess_trend,
    parse_config,
    representativeness,
    summarize_panel,
    weekly_mean_vi,
)
from heatseg.synth import calibration_city


def test_loess_exact_quadratic_and_constant():
    x = np.arange(1, 41, dtype=float)
    q = 0.3 - 0.01 * x + 0.0004 * x**2
    assert_allclose(loess_trend(pd.Series(q, index=x)).to_numpy(), q, atol=1e-8)
    assert_allclose(loess_trend(pd.Series(0.4, index=x)).to_numpy(), 0.4, atol=1e-12)


def _local_wls(x, y, x0, span, degree=2):
    # direct pointwise fit: tricube weights over the ceil(span*n) nearest points, raw polynomial in x
    n = len(x)
    d = np.abs(x - x0)
    h = np.sort(d)[math.ceil(span * n) - 1]
    w = np.clip(1 - (d / h) ** 3, 0, None) ** 3
    W = np.diag(w)
    A = np.column_stack([(x - x0) ** p for p in range(degree + 1)])
    return np.linalg.solve(A.T @ W @ A, A.T @ W @ y)[0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.6, 0.9]))
def test_loess_local_wls_oracle(seed, span):
    rng = np.random.default_rng(seed)
    x = np.arange(1, 31, dtype=float)
    y = rng.normal(size=30)
    fit = loess_trend(pd.Series(y, index=x), span)
    expected = [_local_wls(x, y, x0, span) for x0 in x]
    assert_allclose(fit.to_numpy(), expected, atol=1e-10)


def test_loess_too_short():
    with pytest.raises(ValueError):
        loess_trend(pd.Series([1.0, 2.0, 3.0]), 0.6)


def test_representativeness_proportional_and_oversampled():
    census = {f"c{i}": 100.0 * (i + 1) for i in range(6)}
    bucket = {c: ("a" if i < 3 else "b") for i, c in enumerate(census)}
    prop = representativeness({c: 0.05 * v for c, v in census.items()}, census, bucket)
    assert_allclose(prop["ratio"], 1.0, rtol=1e-14)
    doubled = {c: 0.05 * v * (2 if bucket[c] == "a" else 1) for c, v in census.items()}
    out = representativeness(doubled, census, bucket).set_index("bucket")
    dev_a, dev_b = out.loc["a", "device_total"] / out.loc["a", "census_total"], \
        out.loc["b", "device_total"] / out.loc["b", "census_total"]
    assert_allclose(dev_a / dev_b, 2.0, rtol=1e-14)


def test_representativeness_groupby_oracle():
    rng = np.random.default_rng(12)
    cbgs = [f"c{i}" for i in range(50)]
    dev = dict(zip(cbgs, rng.integers(0, 500, 50).astype(float)))
    cen = dict(zip(cbgs, rng.integers(1, 5000, 50).astype(float)))
    bucket = {c: f"b{rng.integers(0, 4)}" for c in cbgs}
    out = representativeness(dev, cen, bucket, buckets=["b0", "b1", "b2", "b3", "b9"]).set_index("bucket")
    for b in ["b0", "b1", "b2", "b3"]:
        assert out.loc[b, "device_total"] == sum(v for c, v in dev.items() if bucket[c] == b)
        assert out.loc[b, "census_total"] == sum(v for c, v in cen.items() if bucket[c] == b)
    assert out.loc["b9", "census_total"] == 0
    assert_allclose(out["device_scaled"].sum(), out["census_total"].sum(), rtol=1e-13)


def test_summary_constant_and_sentinel():
    weeks = WINDOW.weeks()
    panel = IsolationPanel(["a", "b"], weeks, np.full((2, 4), 0.25), np.zeros((2, 4), bool),
                           excluded_regions=frozenset({"z"}))
    s = summarize_panel(panel).set_index("region_code")
    assert (s.loc[["a", "b"], "mean_vi"] == 0.25).all()
    assert s.loc["z", "excluded"] == 1 and math.isnan(s.loc["z", "mean_vi"])
    assert (weekly_mean_vi(panel) == 0.25).all()


def test_new_york_calibration():
    bundle, meta = calibration_city("new_york")
    summary = summarize_panel(build_isolation_panel(bundle)).set_index("region_code")
    mean = summary.loc[meta["city"]["region_code"], "mean_vi"]
    assert abs(mean - meta["target_mean_vi"]) <= 0.02


def test_parse_config_defaults_and_errors(tmp_path):
    cfg = parse_config({}, {}, tmp_path, check_files=False)
    assert cfg.fixed_effects == "state_month" and cfg.window.n_weeks == 114
    assert cfg.bins.reference_temp_index == 5 and cfg.vcov[0].label == "conley500km_lag4"
    for bad in ({"nonsense": "1"}, {"fixed_effects": "county"}, {"split": "age"}, {"n_weeks": "x"},
                {"categories": "Bowling"}, {"split": "income"}, {"reference_temp_bin": "21, 25"}):
        with pytest.raises(ConfigError):
            parse_config(bad, {}, tmp_path, check_files=False)
    with pytest.raises(MissingInput, match="missing input file"):
        parse_config({}, {}, tmp_path, check_files=True)


def test_load_config(tmp_path):
    ini = tmp_path / "p.ini"
    ini.write_text("[pipeline]\nvcov = robust, cluster\nn_weeks = 10\n\n[scenarios]\nssp5 = s5.csv\n")
    cfg = load_config(ini, check_files=False)
    assert [v.kind for v in cfg.vcov] == ["robust", "cluster"]
    assert cfg.scenarios == {"ssp5": tmp_path / "s5.csv"}
    moved = load_config(ini, {"output_dir": str(tmp_path / "elsewhere")}, check_files=False)
    assert moved.digest == cfg.digest
    assert load_config(ini, {"n_weeks": "12"}, check_files=False).digest != cfg.digest
    (tmp_path / "bad.ini").write_text("[pipeline]\n[extra]\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini", check_files=False)
    with pytest.raises(MissingInput):
        load_config(tmp_path / "absent.ini")
