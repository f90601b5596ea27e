"""Seeded synthetic data and brute-force oracles.

Every random draw goes through numpy's counter-based Philox generator
(``np.random.Generator(np.random.Philox(seed))``) so outputs depend only on
the seed and the numpy sampling algorithms, not on global state.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import _csv
from .climate import BinSpec, ExposurePanel, exposure_panel
from .core import (
    DEVICES_PER_PERSON,
    CbgProfile,
    GroupLabel,
    PoiRecord,
    Region,
    SampleWindow,
    WeekId,
    WeeklyVisitRecord,
    calendar_week,
)
from .ingest import DatasetBundle, write_bundle
from .isolation import IsolationPanel, cbg_labels
from .regress import DesignMatrix

STATES = ("TX", "CA", "NY", "FL", "IL", "GA", "OH", "PA", "AZ", "WA", "CO", "MN", "MO", "NC", "MI", "UT")
# (state FIPS, state code) used to mint CBG codes
STATE_FIPS = {"TX": "48", "CA": "06", "NY": "36", "FL": "12", "IL": "17", "GA": "13", "OH": "39", "PA": "42",
              "AZ": "04", "WA": "53", "CO": "08", "MN": "27", "MO": "29", "NC": "37", "MI": "26", "UT": "49"}
NAICS_POOL = ("712190", "713110", "713940", "722511", "445110", "722410", "452311", "812112")


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class OracleRefused(RuntimeError):
    pass


@dataclass(frozen=True)
class CityParams:
    n_pois: int = 10
    n_cbgs: int = 12
    white_share: float = 0.6
    segregation_dial: float = 0.5
    visits_scale: float = 2000.0
    outside_visitor_rate: float = 0.0
    seed: int = 0
    n_weeks: int = 1
    repeat_rate: float = 0.6
    unresolved_rate: float = 0.0
    region_code: str = "90001"
    state: str = "TX"

    def __post_init__(self):
        for name in ("white_share", "segregation_dial", "outside_visitor_rate", "unresolved_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_pois < 1 or self.n_cbgs < 2 or self.visits_scale <= 0 or self.n_weeks < 1:
            raise ValueError("need n_pois >= 1, n_cbgs >= 2, n_weeks >= 1 and positive visits_scale")


@dataclass
class _City:
    region: Region
    pois: list[PoiRecord]
    cbgs: list[CbgProfile]
    home_white: np.ndarray      # (n_home,) bool
    home_pop: np.ndarray
    outside: list[str]
    attract: np.ndarray         # (n_pois,)
    poi_white: np.ndarray       # (n_pois,) bool


def _make_city(rng, p: CityParams, region: Region, cbg_start: int, n_cbgs_state: str) -> _City:
    fips = STATE_FIPS.get(n_cbgs_state, "48")
    n_white = int(round(p.white_share * p.n_cbgs))
    white = np.arange(p.n_cbgs) < n_white
    pop = rng.integers(400, 3000, size=p.n_cbgs)
    frac = np.where(white, rng.uniform(0.55, 0.95, p.n_cbgs), rng.uniform(0.05, 0.45, p.n_cbgs))
    white_pop = np.floor(frac * pop).astype(int)
    codes = [f"{fips}{cbg_start + i:010d}" for i in range(p.n_cbgs)]
    cbgs = [CbgProfile(c, int(t), int(w), region.code) for c, t, w in zip(codes, pop, white_pop)]
    n_out = max(2, p.n_cbgs // 4)
    out_codes = [f"{fips}{cbg_start + p.n_cbgs + i:010d}" for i in range(n_out)]
    for i, c in enumerate(out_codes):
        t = 1000
        cbgs.append(CbgProfile(c, t, 800 if i % 2 == 0 else 200, None))
    poi_white = np.arange(p.n_pois) < (p.n_pois + 1) // 2
    attract = rng.gamma(2.0, 1.0, size=p.n_pois) + 0.05
    pois = []
    for i in range(p.n_pois):
        lat = region.lat + float(rng.uniform(-0.2, 0.2))
        lon = region.lon + float(rng.uniform(-0.2, 0.2))
        naics = NAICS_POOL[int(rng.integers(len(NAICS_POOL)))]
        pois.append(PoiRecord.from_naics(f"{region.code}-p{i:03d}", region.code, naics, round(lat, 5), round(lon, 5)))
    return _City(region, pois, cbgs, white, pop.astype(float), out_codes, attract, poi_white)


def _choice_matrix(city: _City, dial: float) -> np.ndarray:
    """(n_home, n_pois) POI choice probabilities per home CBG."""
    base = city.attract / city.attract.sum()
    own_w = city.attract * city.poi_white
    own_nw = city.attract * ~city.poi_white
    own_w = own_w / own_w.sum() if own_w.sum() > 0 else base
    own_nw = own_nw / own_nw.sum() if own_nw.sum() > 0 else base
    rows = np.where(city.home_white[:, None], own_w[None, :], own_nw[None, :])
    probs = (1.0 - dial) * base[None, :] + dial * rows
    return probs / probs.sum(axis=1, keepdims=True)


def _city_week(rng, city: _City, p: CityParams, week: WeekId, dial: float) -> list[WeeklyVisitRecord]:
    home_codes = [c.cbg for c in city.cbgs[: len(city.home_pop)]]
    lam = p.visits_scale * city.home_pop / city.home_pop.sum()
    n_visitors = rng.poisson(lam)
    counts = rng.multinomial(n_visitors, _choice_matrix(city, dial))          # (n_home, n_pois)
    n_out = rng.poisson(p.outside_visitor_rate * p.visits_scale)
    out_split = rng.multinomial(n_out, np.full(len(city.outside), 1.0 / len(city.outside)))
    base = city.attract / city.attract.sum()
    out_counts = rng.multinomial(out_split, base) if len(city.outside) else np.zeros((0, len(city.pois)), int)
    records = []
    for j, poi in enumerate(city.pois):
        by_cbg = {c: int(n) for c, n in zip(home_codes, counts[:, j]) if n > 0}
        by_cbg.update({c: int(n) for c, n in zip(city.outside, out_counts[:, j]) if n > 0})
        resolved = sum(by_cbg.values())
        unresolved = int(rng.binomial(resolved, p.unresolved_rate)) if resolved else 0
        t_n = resolved + unresolved
        t_v = t_n + (int(rng.poisson(p.repeat_rate * t_n)) if t_n else 0)
        records.append(WeeklyVisitRecord(poi.poi_id, week, t_v, t_n, by_cbg))
    return records


def generate_city(params: CityParams, window: SampleWindow | None = None) -> DatasetBundle:
    """One-region bundle whose POI choice separates the groups by ``segregation_dial``.

    At dial 1 each POI receives a single group; at dial 0 every CBG draws POIs
    from the same distribution.
    """
    window = window or SampleWindow(n_weeks=max(params.n_weeks, 1))
    rng = rng_for(params.seed)
    region = Region(params.region_code, f"Synthetic City {params.region_code}, {params.state}", params.state,
                    int(1_000_000), 32.0, -97.0)
    city = _make_city(rng, params, region, 1, params.state)
    visits = []
    for w in window.weeks()[: params.n_weeks]:
        visits.extend(_city_week(rng, city, params, w, params.segregation_dial))
    return DatasetBundle(city.pois, visits, city.cbgs, [region], {},
                         {c.cbg: region.code for c in city.cbgs if c.region_code})


def calibration_city(name: str = "new_york") -> tuple[DatasetBundle, dict]:
    """Shipped calibration city and its metadata (``data/<name>_calibration.json``)."""
    meta = json.loads(resources.files("heatseg").joinpath(f"data/{name}_calibration.json").read_text())
    return generate_city(CityParams(**meta["city"])), meta


def oracle_vi(bundle: DatasetBundle, region: str, week: int, max_units: int = 1_000_000) -> float:
    """Per-visit enumeration of the isolation index in exact rational arithmetic.

    Every visitor becomes a list entry carrying its POI's visits-per-visitor
    weight; each POI's White share is recounted from those entries; the group
    averages of the share are then taken entry by entry.
    """
    labels = cbg_labels(bundle.cbgs)
    residency = bundle.residency()
    pois = {p.poi_id for p in bundle.pois if p.region_code == region}
    entries = []   # (poi, label, resident, weight)
    totals = {}
    for rec in bundle.visits:
        if rec.poi_id not in pois or rec.week.index != week:
            continue
        if rec.total_visitors == 0:
            continue
        weight = Fraction(rec.total_visits, rec.total_visitors)
        totals[rec.poi_id] = rec.total_visits
        for cbg, n in rec.visitors_by_cbg.items():
            if cbg not in labels:
                continue
            for _ in range(n):
                entries.append((rec.poi_id, labels[cbg], residency.get(cbg) == region, weight))
                if len(entries) > max_units:
                    raise OracleRefused(f"more than {max_units} visit entries")
    white_mass = {}
    for poi, label, _, wgt in entries:
        if label is GroupLabel.WHITE:
            white_mass[poi] = white_mass.get(poi, 0) + wgt
    share = {poi: Fraction(white_mass.get(poi, 0)) / t for poi, t in totals.items() if t > 0}

    def group_average(group):
        num = den = Fraction(0)
        for poi, label, resident, wgt in entries:
            if label is group and resident:
                num += wgt * share[poi]
                den += wgt
        return None if den == 0 else num / den

    a, b = group_average(GroupLabel.WHITE), group_average(GroupLabel.NONWHITE)
    if a is None or b is None:
        return math.nan
    return float(a - b)


def oracle_ols_dense(design: DesignMatrix, max_obs: int = 5000, rtol: float = 1e-9):
    """Dense dummy-variable WLS.

    Intercept, one dummy per non-reference level of each factor, and per-group
    intercepts and week slopes for trend groups come first; the weather columns
    follow, so a weather column spanned by the dummies is the one reported as
    dropped. Returns ``(beta, dropped)`` with NaN for dropped columns.
    """
    n = design.n_obs
    if n > max_obs:
        raise OracleRefused(f"{n} observations exceed the dense limit {max_obs}")
    blocks = [np.ones((n, 1))]
    for codes in design.levels:
        d = np.zeros((n, int(codes.max()) + 1))
        d[np.arange(n), codes] = 1.0
        blocks.append(d[:, 1:])
    for codes in design.trend_groups:
        d = np.zeros((n, int(codes.max()) + 1))
        d[np.arange(n), codes] = 1.0
        blocks.append(d)
        blocks.append(d * design.time[:, None])
    dummies = np.hstack(blocks)
    sw = np.sqrt(design.weights)
    Z = sw[:, None] * np.hstack([dummies, design.X])
    yz = sw * design.y
    scale = np.sqrt((Z**2).sum(axis=0))
    keep = np.zeros(Z.shape[1], dtype=bool)
    for j in range(Z.shape[1]):
        # residual of column j after least-squares projection on the columns kept so far
        r = Z[:, j]
        if keep.any():
            c, *_ = np.linalg.lstsq(Z[:, keep], r, rcond=None)
            r = r - Z[:, keep] @ c
        keep[j] = scale[j] > 0 and np.linalg.norm(r) > rtol * scale[j]
    # collinear dummies are dropped silently; only weather columns are reported
    coef, *_ = np.linalg.lstsq(Z[:, keep], yz, rcond=None)
    full = np.full(Z.shape[1], np.nan)
    full[keep] = coef
    k_d = dummies.shape[1]
    beta = full[k_d:]
    dropped = [c for c, k in zip(design.columns, keep[k_d:]) if not k]
    return beta, dropped


@dataclass(frozen=True)
class DgpParams:
    n_regions: int = 40
    n_weeks: int = 60
    beta_true: tuple[float, ...] = (-0.002, -0.001, -0.0005, 0.0, 0.0003, 0.0008, 0.0012, 0.002)
    rho_true: tuple[float, ...] = (0.0004, -0.0006, 0.001)
    fe_scales: tuple[float, float, float] = (0.05, 0.01, 0.01)
    noise_sd: float = 0.004
    seed: int = 0
    heteroskedastic: bool = False

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass
class DgpResult:
    vi_panel: IsolationPanel
    exposure: ExposurePanel
    regions: dict[str, Region]
    beta_true: dict[str, float]
    rho_true: dict[str, float]
    region_days: pd.DataFrame = field(repr=False, default=None)


def synthetic_regions(rng, n: int, code_start: int = 10000) -> list[Region]:
    n_states = max(2, min(len(STATES), n // 3))
    out = []
    for i in range(n):
        state = STATES[i % n_states]
        lat = float(rng.uniform(27.0, 47.0))
        lon = float(rng.uniform(-122.0, -72.0))
        pop = int(np.exp(rng.uniform(np.log(1.0e5), np.log(2.0e7))))
        code = f"{code_start + 20 * i:05d}"
        out.append(Region(code, f"Synthetic Metro {i}, {state}", state, pop, round(lat, 4), round(lon, 4)))
    return out


def _region_normals(regions: Sequence[Region]) -> np.ndarray:
    # warmer toward the south, deterministic from latitude
    return np.array([33.0 - 0.7 * (r.lat - 27.0) for r in regions])


def synthetic_weather(rng, regions: Sequence[Region], start: dt.date, n_days: int, warming: float = 0.0,
                      noise_sd: float = 4.5) -> pd.DataFrame:
    """Region-day weather with a seasonal cycle; columns ``region_code,date,tmax_c,precip_mm``."""
    dates = [start + dt.timedelta(days=d) for d in range(n_days)]
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=float)
    season = np.cos(2 * np.pi * (doy - 200.0) / 365.25)
    normals = _region_normals(regions)
    tmax = normals[:, None] - 5.0 + 13.0 * season[None, :] + warming
    tmax = tmax + rng.normal(0.0, noise_sd, size=tmax.shape)
    wet = rng.random(tmax.shape) < 0.3
    precip = np.where(wet, rng.exponential(7.0, size=tmax.shape), 0.0)
    precip = np.round(precip, 1)
    tmax = np.round(tmax, 2)
    n_r = len(regions)
    return pd.DataFrame({
        "region_code": np.repeat([r.code for r in regions], n_days),
        "date": dates * n_r,
        "tmax_c": tmax.ravel(),
        "precip_mm": precip.ravel(),
    })


def generate_dgp(params: DgpParams, spec: BinSpec | None = None) -> DgpResult:
    """Panels from ``VI = H beta + P rho + region + week + state-month effects + noise``."""
    spec = spec or BinSpec()
    rng = rng_for(params.seed)
    regions = synthetic_regions(rng, params.n_regions)
    window = SampleWindow(n_weeks=params.n_weeks)
    days = synthetic_weather(rng, regions, window.start, 7 * params.n_weeks)
    ex = exposure_panel(days, spec, window, regions=[r.code for r in regions])
    t_cols = [b for b in range(spec.n_temp) if b != spec.reference_temp_index]
    p_cols = [b for b in range(spec.n_precip) if b != spec.reference_precip_bin]
    beta = np.asarray(params.beta_true, dtype=float)
    rho = np.asarray(params.rho_true, dtype=float)
    if len(beta) != len(t_cols) or len(rho) != len(p_cols):
        raise ValueError("beta_true / rho_true lengths do not match the bin specification")
    signal = ex.temp[:, :, t_cols] @ beta + ex.precip[:, :, p_cols] @ rho
    n, t = params.n_regions, params.n_weeks
    mu = rng.normal(0.3, params.fe_scales[0], size=n)
    delta = rng.normal(0.0, params.fe_scales[1], size=t)
    weeks = window.weeks()
    sm_keys = sorted({(r.state, w.monday.year, w.monday.month) for r in regions for w in weeks})
    eta_map = dict(zip(sm_keys, rng.normal(0.0, params.fe_scales[2], size=len(sm_keys))))
    eta = np.array([[eta_map[(r.state, w.monday.year, w.monday.month)] for w in weeks] for r in regions])
    sd = params.noise_sd
    if params.heteroskedastic:
        sd = params.noise_sd * (0.5 + rng.random((n, t)))
    noise = rng.normal(0.0, 1.0, size=(n, t)) * sd
    vi = signal + mu[:, None] + delta[None, :] + eta + noise
    panel = IsolationPanel([r.code for r in regions], weeks, vi, np.zeros((n, t), dtype=bool))
    return DgpResult(
        panel, ex, {r.code: r for r in regions},
        {spec.temp_labels[b]: float(v) for b, v in zip(t_cols, beta)},
        {spec.precip_labels[b]: float(v) for b, v in zip(p_cols, rho)},
        days,
    )


@dataclass(frozen=True)
class DatasetParams:
    """A multi-region input directory for the end-to-end pipeline."""

    n_regions: int = 30
    n_weeks: int = 114
    pois_per_region: int = 8
    cbgs_per_region: int = 10
    cells_per_region: int = 2
    visits_scale: float = 600.0
    outside_visitor_rate: float = 0.05
    base_dial: float = 0.35
    heat_response: float = 0.03      # dial increase per day at or above 30 C
    reference_years: tuple[int, int] = (2015, 2016)
    scenario_year: int = 2050
    scenarios: tuple[tuple[str, float], ...] = (("ssp1", 1.0), ("ssp5", 2.2))
    seed: int = 0


def _cell_frame(rng, days: pd.DataFrame, regions, cells_per_region: int, with_precip: bool = True) -> pd.DataFrame:
    """Split region-day weather into grid cells with offsets and populations that re-aggregate exactly-ish."""
    frames = []
    n_days = len(days) // len(regions)
    for k in range(cells_per_region):
        offset = np.repeat(rng.normal(0.0, 0.8, size=len(regions)), n_days)
        pop = np.repeat(rng.integers(1000, 50000, size=len(regions)), n_days).astype(float)
        frames.append(pd.DataFrame({
            "cell_id": [f"c{code}_{k}" for code in days["region_code"]],
            "date": days["date"].to_numpy(),
            "tmax_c": np.round(days["tmax_c"].to_numpy() + offset, 2),
            "precip_mm": days["precip_mm"].to_numpy() if with_precip else np.nan,
            "population": pop,
        }))
    return pd.concat(frames, ignore_index=True)


def write_grid(frame: pd.DataFrame, path):
    cols = ["cell_id", "date", "tmax_c", "precip_mm", "population"]
    return _csv.write_csv(path, "grid_daily v1", cols, (
        (c, d.isoformat(), float(t), float(p), float(w))
        for c, d, t, p, w in frame[cols].itertuples(index=False, name=None)))


def generate_dataset(params: DatasetParams, out_dir) -> dict[str, Path]:
    """Write every pipeline input plus ``pipeline.ini`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = rng_for(params.seed)
    regions = synthetic_regions(rng, params.n_regions)
    window = SampleWindow(n_weeks=params.n_weeks)
    days = synthetic_weather(rng, regions, window.start, 7 * params.n_weeks)
    hot = (days["tmax_c"].to_numpy().reshape(len(regions), params.n_weeks, 7) >= 30.0).sum(axis=-1)

    pois, cbgs, visits, cbg_map = [], [], [], {}
    for i, region in enumerate(regions):
        cp = CityParams(n_pois=params.pois_per_region, n_cbgs=params.cbgs_per_region,
                        white_share=float(rng.uniform(0.35, 0.8)), segregation_dial=params.base_dial,
                        visits_scale=params.visits_scale, outside_visitor_rate=params.outside_visitor_rate,
                        unresolved_rate=0.05, region_code=region.code, state=region.state)
        city = _make_city(rng, cp, region, 1 + i * 1000, region.state)
        pois.extend(city.pois)
        cbgs.extend(city.cbgs)
        cbg_map.update({c.cbg: region.code for c in city.cbgs if c.region_code})
        for j, w in enumerate(window.weeks()):
            dial = min(1.0, params.base_dial + params.heat_response * hot[i, j])
            visits.extend(_city_week(rng, city, cp, w, dial))

    cells = _cell_frame(rng, days, regions, params.cells_per_region)
    grid_map = {c: c.split("_")[0][1:] for c in sorted(set(cells["cell_id"]))}
    bundle = DatasetBundle(pois, visits, cbgs, regions, grid_map, cbg_map)
    paths = write_bundle(bundle, out)
    paths["grid_daily"] = write_grid(cells, out / "grid_daily.csv")

    first, last = params.reference_years
    ref_start = dt.date(first, 1, 1)
    ref_days = synthetic_weather(rng, regions, ref_start, (dt.date(last + 1, 1, 1) - ref_start).days)
    paths["reference_grid"] = write_grid(_cell_frame(rng, ref_days, regions, params.cells_per_region),
                                         out / "reference_grid.csv")
    scen_start = dt.date(params.scenario_year, 1, 1)
    scen_days_n = (dt.date(params.scenario_year + 1, 1, 1) - scen_start).days
    scenario_paths = {}
    for name, warming in params.scenarios:
        sd = synthetic_weather(rng, regions, scen_start, scen_days_n, warming=warming)
        scenario_paths[name] = write_grid(_cell_frame(rng, sd, regions, params.cells_per_region),
                                          out / f"scenario_{name}.csv")
    paths.update({f"scenario_{k}": v for k, v in scenario_paths.items()})

    paths["devices"] = _csv.write_csv(out / "region_devices.csv", "region_devices v1", ("region_code", "devices"), (
        (r.code, round(DEVICES_PER_PERSON * r.population)) for r in regions))
    paths["income"] = _csv.write_csv(out / "region_income.csv", "region_income v1",
                                     ("region_code", "income_per_capita"),
                                     ((r.code, round(float(rng.uniform(25000, 60000)), 2)) for r in regions))
    home = [c for c in cbgs if c.region_code]
    paths["cbg_devices"] = _csv.write_csv(out / "cbg_devices.csv", "cbg_devices v1", ("cbg", "devices"), (
        (c.cbg, int(rng.binomial(c.total_pop, DEVICES_PER_PERSON))) for c in home))
    lines = [
        "[pipeline]",
        "input_dir = .",
        f"sample_start = {window.start.isoformat()}",
        f"n_weeks = {params.n_weeks}",
        f"reference_years = {first}, {last}",
        f"scenario_year = {params.scenario_year}",
        "income = region_income.csv",
        "cbg_devices = cbg_devices.csv",
        "fixed_effects = state_month",
        "vcov = conley, robust, cluster",
        "output_dir = out",
        "",
        "[scenarios]",
        *[f"{k} = {Path(v).name}" for k, v in scenario_paths.items()],
        "",
    ]
    cfg = out / "pipeline.ini"
    cfg.write_text("\n".join(lines), encoding="utf-8")
    paths["config"] = cfg
    return paths


def week_calendar_summary(weeks: Sequence[WeekId]) -> list[int]:
    return [calendar_week(w.monday) for w in weeks]
