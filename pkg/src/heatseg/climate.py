"""Population-weighted regional weather, weekly bin-day counts, climatology and scenario deltas.

Temperature bins are half-open ``[lower, upper)`` with open-ended bottom and
top bins. Precipitation bins are ``{p <= e0}``, ``(e0, e1)``, ``[e1, e2)``, ...,
``[e_last, inf)``; with the default edges this is dry / (0,5) / [5,15) / 15+ mm.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from . import _csv
from .core import WEEKS_PER_YEAR, SampleWindow

GRID_COLUMNS = ("cell_id", "date", "tmax_c", "precip_mm", "population")


class AggregationError(ValueError):
    pass


class IncompleteWeek(ValueError):
    pass


class CoverageError(ValueError):
    pass


def _edge(x: float) -> str:
    return format(x, "g").replace("-", "m")


@dataclass(frozen=True)
class BinSpec:
    temp_edges: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0)
    reference_temp_bin: tuple[float, float] = (20.0, 25.0)
    precip_edges: tuple[float, ...] = (0.0, 5.0, 15.0)
    reference_precip_bin: int = 0

    def __post_init__(self):
        for name in ("temp_edges", "precip_edges"):
            edges = tuple(float(e) for e in getattr(self, name))
            if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
                raise ValueError(f"{name} must be strictly ascending and nonempty")
            object.__setattr__(self, name, edges)
        ref = tuple(float(e) for e in self.reference_temp_bin)
        object.__setattr__(self, "reference_temp_bin", ref)
        self.reference_temp_index  # validates
        if not 0 <= self.reference_precip_bin < self.n_precip:
            raise ValueError("reference precipitation bin out of range")

    @property
    def n_temp(self) -> int:
        return len(self.temp_edges) + 1

    @property
    def n_precip(self) -> int:
        return len(self.precip_edges) + 1

    @property
    def temp_bounds(self) -> list[tuple[float, float]]:
        e = (-np.inf,) + self.temp_edges + (np.inf,)
        return list(zip(e[:-1], e[1:]))

    @property
    def reference_temp_index(self) -> int:
        try:
            return self.temp_bounds.index(self.reference_temp_bin)
        except ValueError:
            raise ValueError(f"reference bin {self.reference_temp_bin} is not one of the temperature bins") from None

    @property
    def temp_labels(self) -> list[str]:
        out = []
        for lo, hi in self.temp_bounds:
            if np.isinf(lo):
                out.append(f"tmax_lt{_edge(hi)}")
            elif np.isinf(hi):
                out.append(f"tmax_ge{_edge(lo)}")
            else:
                out.append(f"tmax_{_edge(lo)}_{_edge(hi)}")
        return out

    @property
    def precip_labels(self) -> list[str]:
        e = self.precip_edges
        out = [f"precip_{_edge(e[0])}"]
        out += [f"precip_{_edge(a)}_{_edge(b)}" for a, b in zip(e[:-1], e[1:])]
        out.append(f"precip_ge{_edge(e[-1])}")
        return out

    def temp_bin(self, tmax) -> np.ndarray:
        t = np.asarray(tmax, dtype=float)
        if not np.isfinite(t).all():
            raise ValueError("non-finite daily maximum temperature")
        return np.searchsorted(np.asarray(self.temp_edges), t, side="right")

    def precip_bin(self, precip) -> np.ndarray:
        p = np.asarray(precip, dtype=float)
        if not np.isfinite(p).all() or (p < 0).any():
            raise ValueError("precipitation must be finite and non-negative")
        e = np.asarray(self.precip_edges)
        upper = np.searchsorted(e[1:], p, side="right") + 1
        return np.where(p <= e[0], 0, upper)


@dataclass(frozen=True)
class GridCellDay:
    cell_id: str
    date: dt.date
    tmax: float
    precip: float
    population: float


@dataclass(frozen=True)
class RegionDayWeather:
    region: str
    date: dt.date
    tmax: float
    precip: float


def _as_frame(cells) -> pd.DataFrame:
    if isinstance(cells, pd.DataFrame):
        return cells
    rows = [(c.cell_id, c.date, c.tmax, c.precip, c.population) for c in cells]
    return pd.DataFrame(rows, columns=list(GRID_COLUMNS))


def aggregate_to_region(cells, mapping: Mapping[str, str]) -> pd.DataFrame:
    """Population-weighted daily means per region.

    ``cells`` is a frame with columns ``cell_id,date,tmax_c,precip_mm,population``
    (or an iterable of :class:`GridCellDay`). Returns columns
    ``region_code,date,tmax_c,precip_mm`` sorted by region and date.
    """
    frame = _as_frame(cells)
    frame = frame.assign(region_code=frame["cell_id"].map(mapping))
    frame = frame[frame["region_code"].notna()]
    if (frame["population"] < 0).any():
        raise AggregationError("negative grid-cell population")
    frame = frame.sort_values(["region_code", "date", "cell_id"], kind="mergesort")
    w = frame["population"].to_numpy(dtype=float)
    work = pd.DataFrame({
        "region_code": frame["region_code"].to_numpy(),
        "date": frame["date"].to_numpy(),
        "w": w,
        "wt": w * frame["tmax_c"].to_numpy(dtype=float),
        "wp": w * frame["precip_mm"].to_numpy(dtype=float),
    })
    g = work.groupby(["region_code", "date"], sort=True)
    sums = g[["w", "wt", "wp"]].sum(min_count=1)
    zero = sums["w"] <= 0
    if zero.any():
        region, date = sums.index[zero.to_numpy()][0]
        raise AggregationError(f"region {region} has zero population weight on {date}")
    out = pd.DataFrame({
        "tmax_c": sums["wt"] / sums["w"],
        "precip_mm": sums["wp"] / sums["w"],
    }).reset_index()
    return out


def read_grid_daily(path) -> pd.DataFrame:
    frame = _csv.read_frame(path, GRID_COLUMNS, dtype={"cell_id": str, "date": str})
    frame["date"] = pd.to_datetime(frame["date"], format="%Y-%m-%d").dt.date
    return frame


def read_grid_map(path) -> dict[str, str]:
    frame = _csv.read_frame(path, ("cell_id", "region_code"), dtype=str)
    return dict(zip(frame["cell_id"], frame["region_code"]))


def bin_days(tmax, precip, spec: BinSpec) -> tuple[np.ndarray, np.ndarray]:
    h = np.bincount(spec.temp_bin(tmax), minlength=spec.n_temp)
    p = np.bincount(spec.precip_bin(precip), minlength=spec.n_precip)
    return h, p


def bin_week(days: Sequence[RegionDayWeather], spec: BinSpec) -> tuple[np.ndarray, np.ndarray]:
    """Temperature and precipitation bin-day counts for one Monday-aligned week."""
    days = sorted(days, key=lambda d: d.date)
    if len(days) != 7:
        raise IncompleteWeek(f"expected 7 days, got {len(days)}")
    if days[0].date.weekday() != 0:
        raise IncompleteWeek(f"week starts on {days[0].date}, not a Monday")
    if any((b.date - a.date).days != 1 for a, b in zip(days, days[1:])):
        raise IncompleteWeek("days are not consecutive")
    return bin_days([d.tmax for d in days], [d.precip for d in days], spec)


def _daily_grid(region_days: pd.DataFrame, regions: Sequence[str], start: dt.date, n_days: int,
                column: str) -> np.ndarray:
    """Region x day array over ``start .. start+n_days-1``; NaN where absent."""
    ri = {r: i for i, r in enumerate(regions)}
    out = np.full((len(regions), n_days), np.nan)
    dates = np.asarray(region_days["date"].to_numpy(), dtype="datetime64[D]")
    offs = (dates - np.datetime64(start, "D")).astype(np.int64)
    rows = region_days["region_code"].map(ri).to_numpy()
    ok = (offs >= 0) & (offs < n_days) & pd.notna(rows)
    out[rows[ok].astype(np.int64), offs[ok]] = region_days[column].to_numpy(dtype=float)[ok]
    return out


def _counts(index: np.ndarray, n_bins: int) -> np.ndarray:
    """Count bin hits along the last axis."""
    return np.stack([(index == b).sum(axis=-1) for b in range(n_bins)], axis=-1)


@dataclass
class ExposurePanel:
    regions: list[str]
    weeks: list
    temp: np.ndarray        # (N, T, k_H) day counts
    precip: np.ndarray      # (N, T, k_P) day counts
    precip_total: np.ndarray  # (N, T) weekly precipitation sum in mm
    spec: BinSpec = field(default_factory=BinSpec)


def exposure_panel(region_days: pd.DataFrame, spec: BinSpec, window: SampleWindow,
                   regions: Sequence[str] | None = None) -> ExposurePanel:
    regions = sorted(set(region_days["region_code"])) if regions is None else list(regions)
    n_days = 7 * window.n_weeks
    tmax = _daily_grid(region_days, regions, window.start, n_days, "tmax_c")
    prcp = _daily_grid(region_days, regions, window.start, n_days, "precip_mm")
    gaps = np.argwhere(np.isnan(tmax) | np.isnan(prcp))
    if len(gaps):
        i, d = gaps[0]
        raise IncompleteWeek(f"region {regions[i]} lacks weather on {window.start + dt.timedelta(days=int(d))} "
                             f"({len(gaps)} region-days missing)")
    shape = (len(regions), window.n_weeks, 7)
    h_idx = spec.temp_bin(tmax).reshape(shape)
    p_idx = spec.precip_bin(prcp).reshape(shape)
    return ExposurePanel(
        regions=regions,
        weeks=window.weeks(),
        temp=_counts(h_idx, spec.n_temp),
        precip=_counts(p_idx, spec.n_precip),
        precip_total=prcp.reshape(shape).sum(axis=-1),
        spec=spec,
    )


def _calendar_year_blocks(tmax: np.ndarray, year: int, spec: BinSpec) -> np.ndarray:
    """(N, 52, k_H) bin counts for the 52 seven-day blocks of a year; days 365/366 are dropped."""
    days = tmax[:, : 7 * WEEKS_PER_YEAR]
    idx = spec.temp_bin(days).reshape(days.shape[0], WEEKS_PER_YEAR, 7)
    return _counts(idx, spec.n_temp)


def _year_arrays(region_days, regions, years: Iterable[int]):
    for year in years:
        start = dt.date(year, 1, 1)
        n_days = (dt.date(year + 1, 1, 1) - start).days
        tmax = _daily_grid(region_days, regions, start, n_days, "tmax_c")
        gaps = np.argwhere(np.isnan(tmax))
        if len(gaps):
            missing = [f"{regions[i]}@{start + dt.timedelta(days=int(d))}" for i, d in gaps[:5]]
            raise CoverageError(f"{len(gaps)} region-days missing in {year}, e.g. {', '.join(missing)}")
        yield year, tmax


@dataclass
class Climatology:
    regions: list[str]
    weekly: np.ndarray  # (N, 52, k_H) mean day counts per calendar week
    spec: BinSpec
    years: tuple[int, int]

    def annual(self) -> np.ndarray:
        """Mean days per bin per year under the 52-week convention."""
        return self.weekly.mean(axis=1) * WEEKS_PER_YEAR


def climatology(region_days: pd.DataFrame, spec: BinSpec, years: tuple[int, int] = (1987, 2017),
                regions: Sequence[str] | None = None) -> Climatology:
    """Mean bin-day counts per calendar week over the inclusive reference years."""
    regions = sorted(set(region_days["region_code"])) if regions is None else list(regions)
    first, last = years
    acc = None
    for year, tmax in _year_arrays(region_days, regions, range(first, last + 1)):
        counts = _calendar_year_blocks(tmax, year, spec).astype(float)
        acc = counts if acc is None else acc + counts
    if acc is None:
        raise CoverageError("empty reference period")
    return Climatology(regions, acc / (last - first + 1), spec, (first, last))


@dataclass
class ScenarioDelta:
    regions: list[str]
    labels: list[str]
    delta: np.ndarray  # (N, k_H) mean weekly day-count change
    scenario: str

    def for_region(self, region: str) -> np.ndarray:
        return self.delta[self.regions.index(region)]


def scenario_delta(scenario_days: pd.DataFrame, clim: Climatology, spec: BinSpec, year: int = 2050,
                   scenario: str = "scenario") -> ScenarioDelta:
    if spec != clim.spec:
        raise ValueError("bin specification differs between scenario and climatology")
    ((_, tmax),) = _year_arrays(scenario_days, clim.regions, [year])
    counts = _calendar_year_blocks(tmax, year, spec).astype(float)
    delta = (counts - clim.weekly).mean(axis=1)
    return ScenarioDelta(list(clim.regions), spec.temp_labels, delta, scenario)


EXPOSURE_COLUMNS = ("region_code", "week_monday", "bin_label", "days")
PRECIP_TOTAL_LABEL = "precip_mm_total"
DELTA_COLUMNS = ("region_code", "bin_label", "delta_days_per_week", "scenario")


def write_exposure_panel(panel: ExposurePanel, path):
    """Long form; rows labelled ``precip_mm_total`` carry weekly millimetres in the ``days`` column."""
    spec = panel.spec

    def rows():
        for i, r in enumerate(panel.regions):
            for j, w in enumerate(panel.weeks):
                m = w.monday.isoformat()
                for b, label in enumerate(spec.temp_labels):
                    yield r, m, label, int(panel.temp[i, j, b])
                for b, label in enumerate(spec.precip_labels):
                    yield r, m, label, int(panel.precip[i, j, b])
                yield r, m, PRECIP_TOTAL_LABEL, float(panel.precip_total[i, j])

    return _csv.write_csv(path, "exposure_panel v1", EXPOSURE_COLUMNS, rows())


def read_exposure_panel(path, spec: BinSpec, window: SampleWindow) -> ExposurePanel:
    frame = _csv.read_frame(path, EXPOSURE_COLUMNS, dtype={"region_code": str, "week_monday": str,
                                                            "bin_label": str})
    regions = sorted(set(frame["region_code"]))
    weeks = sorted({window.week_of(dt.date.fromisoformat(m)) for m in frame["week_monday"]})
    ri = {r: i for i, r in enumerate(regions)}
    wj = {w.monday.isoformat(): j for j, w in enumerate(weeks)}
    tl = {label: b for b, label in enumerate(spec.temp_labels)}
    pl = {label: b for b, label in enumerate(spec.precip_labels)}
    known = set(tl) | set(pl) | {PRECIP_TOTAL_LABEL}
    unknown = set(frame["bin_label"]) - known
    if unknown:
        raise _csv.SchemaError(f"{path}: bin labels {sorted(unknown)} do not match the configured bins")
    n, t = len(regions), len(weeks)
    temp = np.zeros((n, t, spec.n_temp), dtype=np.int64)
    precip = np.zeros((n, t, spec.n_precip), dtype=np.int64)
    total = np.zeros((n, t))
    for r, m, label, v in frame.itertuples(index=False):
        i, j = ri[r], wj[m]
        if label in tl:
            temp[i, j, tl[label]] = int(v)
        elif label in pl:
            precip[i, j, pl[label]] = int(v)
        else:
            total[i, j] = float(v)
    return ExposurePanel(regions, weeks, temp, precip, total, spec)


def write_scenario_deltas(deltas: Sequence[ScenarioDelta], path):
    return _csv.write_csv(path, "scenario_delta v1", DELTA_COLUMNS, (
        (r, label, float(d.delta[i, b]), d.scenario)
        for d in deltas for i, r in enumerate(d.regions) for b, label in enumerate(d.labels)))


def read_scenario_deltas(path, spec: BinSpec) -> list[ScenarioDelta]:
    frame = _csv.read_frame(path, DELTA_COLUMNS, dtype={"region_code": str, "bin_label": str, "scenario": str})
    labels = spec.temp_labels
    out = []
    for name, g in frame.groupby("scenario", sort=False):
        regions = list(dict.fromkeys(g["region_code"]))
        delta = np.zeros((len(regions), len(labels)))
        ri = {r: i for i, r in enumerate(regions)}
        li = {label: b for b, label in enumerate(labels)}
        for r, label, v, _ in g.itertuples(index=False):
            if label not in li:
                raise _csv.SchemaError(f"{path}: unknown bin label {label}")
            delta[ri[r], li[label]] = float(v)
        out.append(ScenarioDelta(regions, labels, delta, name))
    return out
