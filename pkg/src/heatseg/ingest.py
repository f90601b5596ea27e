"""Parse and validate the flat CSV inputs into core types.

File contracts (one ``#schema:`` comment line may precede the header)::

    visits.csv          poi_id,week_monday,total_visits,total_visitors,visitors_by_cbg
    pois.csv            poi_id,region_code,naics,lat,lon
    cbgs.csv            cbg,total_pop,white_pop[,region_code]
    regions.csv         region_code,name,state,population,lat,lon
    grid_to_region.csv  cell_id,region_code
    cbg_to_region.csv   cbg,region_code

``visitors_by_cbg`` is a JSON object literal mapping CBG code to visitor count.
"""

from __future__ import annotations

import datetime as dt
import json
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from . import _csv
from .core import (
    DEFAULT_CATEGORY_MAP,
    DEFAULT_WINDOW,
    CbgProfile,
    OutOfRange,
    PoiRecord,
    Region,
    SampleWindow,
    WeeklyVisitRecord,
    categorize,
    cbg_id,
    check_poi_location,
)

VISITS_COLUMNS = ("poi_id", "week_monday", "total_visits", "total_visitors", "visitors_by_cbg")
POIS_COLUMNS = ("poi_id", "region_code", "naics", "lat", "lon")
CBGS_COLUMNS = ("cbg", "total_pop", "white_pop", "region_code")
REGIONS_COLUMNS = ("region_code", "name", "state", "population", "lat", "lon")
GRID_MAP_COLUMNS = ("cell_id", "region_code")
CBG_MAP_COLUMNS = ("cbg", "region_code")

INPUT_FILES = {
    "visits": "visits.csv",
    "pois": "pois.csv",
    "cbgs": "cbgs.csv",
    "regions": "regions.csv",
    "grid_to_region": "grid_to_region.csv",
    "cbg_to_region": "cbg_to_region.csv",
}


@dataclass(frozen=True)
class RowError:
    file: str
    line: int
    message: str

    def __str__(self):
        return f"{self.file}:{self.line}: {self.message}"


def _int(text: str, name: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ValueError(f"{name} {text!r} is not an integer") from None
    return value


def _decode_cbg_map(text: str) -> dict[str, int]:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ValueError(f"visitors_by_cbg is not valid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ValueError("visitors_by_cbg must be an object")
    out = {}
    for key, n in raw.items():
        cbg_id(key)
        if not isinstance(n, int) or isinstance(n, bool) or n <= 0:
            raise ValueError(f"visitor count for {key} must be a positive integer, got {n!r}")
        out[key] = n
    return out


def encode_cbg_map(visitors: Mapping[str, int]) -> str:
    return json.dumps(dict(visitors), separators=(",", ":"))


def parse_visits(path, window: SampleWindow = DEFAULT_WINDOW):
    """Parse visits.csv.

    Returns ``(records, errors)``. Malformed rows, negative counts, visits
    below visitors and duplicate ``(poi_id, week)`` pairs each produce a
    :class:`RowError` instead of a record.
    """
    name = Path(path).name
    records, errors = [], []
    seen = set()
    for lineno, row in _csv.read_rows(path, VISITS_COLUMNS):
        try:
            monday = dt.date.fromisoformat(row["week_monday"])
            if monday.weekday() != 0:
                raise ValueError(f"week_monday {monday} is not a Monday")
            week = window.week_of(monday)
            rec = WeeklyVisitRecord(
                poi_id=row["poi_id"],
                week=week,
                total_visits=_int(row["total_visits"], "total_visits"),
                total_visitors=_int(row["total_visitors"], "total_visitors"),
                visitors_by_cbg=_decode_cbg_map(row["visitors_by_cbg"]),
            )
        except (ValueError, OutOfRange) as exc:
            errors.append(RowError(name, lineno, str(exc)))
            continue
        key = (rec.poi_id, rec.week.index)
        if key in seen:
            errors.append(RowError(name, lineno, f"duplicate row for poi {rec.poi_id} week {monday}"))
            continue
        seen.add(key)
        records.append(rec)
    return records, errors


def parse_pois(path, category_map=DEFAULT_CATEGORY_MAP):
    name = Path(path).name
    out, errors = [], []
    for lineno, row in _csv.read_rows(path, POIS_COLUMNS):
        try:
            naics = row["naics"].strip()
            if len(naics) != 6 or not naics.isdigit():
                raise ValueError(f"naics {naics!r} is not a 6-digit code")
            out.append(PoiRecord(row["poi_id"], row["region_code"], naics, float(row["lat"]),
                                 float(row["lon"]), categorize(naics, category_map)))
        except ValueError as exc:
            errors.append(RowError(name, lineno, str(exc)))
    return out, errors


def parse_cbgs(path):
    name = Path(path).name
    out, errors = [], []
    for lineno, row in _csv.read_rows(path, CBGS_COLUMNS[:3], optional=("region_code",)):
        try:
            out.append(CbgProfile(cbg_id(row["cbg"]), _int(row["total_pop"], "total_pop"),
                                  _int(row["white_pop"], "white_pop"), row.get("region_code") or None))
        except ValueError as exc:
            errors.append(RowError(name, lineno, str(exc)))
    return out, errors


def parse_regions(path):
    name = Path(path).name
    out, errors = [], []
    for lineno, row in _csv.read_rows(path, REGIONS_COLUMNS):
        try:
            out.append(Region(row["region_code"], row["name"], row["state"],
                              _int(row["population"], "population"), float(row["lat"]), float(row["lon"])))
        except ValueError as exc:
            errors.append(RowError(name, lineno, str(exc)))
    return out, errors


def parse_mapping(path, key: str):
    name = Path(path).name
    out, errors = {}, []
    for lineno, row in _csv.read_rows(path, (key, "region_code")):
        k = row[key]
        if key == "cbg":
            try:
                cbg_id(k)
            except ValueError as exc:
                errors.append(RowError(name, lineno, str(exc)))
                continue
        if k in out:
            errors.append(RowError(name, lineno, f"duplicate {key} {k}"))
            continue
        out[k] = row["region_code"]
    return out, errors


@dataclass(frozen=True)
class DatasetBundle:
    pois: list[PoiRecord]
    visits: list[WeeklyVisitRecord]
    cbgs: list[CbgProfile]
    regions: list[Region]
    grid_to_region: dict[str, str] = field(default_factory=dict)
    cbg_to_region: dict[str, str] = field(default_factory=dict)
    parse_errors: list[RowError] = field(default_factory=list)

    def region_map(self) -> dict[str, Region]:
        return {r.code: r for r in self.regions}

    def poi_map(self) -> dict[str, PoiRecord]:
        return {p.poi_id: p for p in self.pois}

    def residency(self) -> dict[str, str | None]:
        """CBG -> home region; the crosswalk wins over the profile column."""
        out = {c.cbg: c.region_code for c in self.cbgs}
        out.update(self.cbg_to_region)
        return out

    def weeks(self):
        return sorted({v.week for v in self.visits})

    def replace(self, **changes) -> "DatasetBundle":
        return replace(self, **changes)


def load_bundle(paths: Mapping[str, str | Path] | str | Path, window: SampleWindow = DEFAULT_WINDOW,
                category_map=DEFAULT_CATEGORY_MAP) -> DatasetBundle:
    """Load a bundle from a directory of canonically named files or an explicit path map."""
    if not isinstance(paths, Mapping):
        base = Path(paths)
        paths = {k: base / v for k, v in INPUT_FILES.items()}
    for key in ("visits", "pois", "cbgs", "regions"):
        p = Path(paths[key])
        if not p.is_file():
            raise FileNotFoundError(f"missing input file: {p}")
    visits, e1 = parse_visits(paths["visits"], window)
    pois, e2 = parse_pois(paths["pois"], category_map)
    cbgs, e3 = parse_cbgs(paths["cbgs"])
    regions, e4 = parse_regions(paths["regions"])
    grid_map, cbg_map, e5, e6 = {}, {}, [], []
    if paths.get("grid_to_region") and Path(paths["grid_to_region"]).is_file():
        grid_map, e5 = parse_mapping(paths["grid_to_region"], "cell_id")
    if paths.get("cbg_to_region") and Path(paths["cbg_to_region"]).is_file():
        cbg_map, e6 = parse_mapping(paths["cbg_to_region"], "cbg")
    return DatasetBundle(pois, visits, cbgs, regions, grid_map, cbg_map, e1 + e2 + e3 + e4 + e5 + e6)


def write_bundle(bundle: DatasetBundle, directory) -> dict[str, Path]:
    """Write the canonical CSV forms; parsing them back reproduces identical bytes."""
    d = Path(directory)
    out = {
        "visits": _csv.write_csv(d / INPUT_FILES["visits"], "visits v1", VISITS_COLUMNS, (
            (v.poi_id, v.week.monday.isoformat(), v.total_visits, v.total_visitors,
             encode_cbg_map(v.visitors_by_cbg)) for v in bundle.visits)),
        "pois": _csv.write_csv(d / INPUT_FILES["pois"], "pois v1", POIS_COLUMNS, (
            (p.poi_id, p.region_code, p.naics, p.lat, p.lon) for p in bundle.pois)),
        "cbgs": _csv.write_csv(d / INPUT_FILES["cbgs"], "cbgs v1", CBGS_COLUMNS, (
            (c.cbg, c.total_pop, c.white_pop, c.region_code or "") for c in bundle.cbgs)),
        "regions": _csv.write_csv(d / INPUT_FILES["regions"], "regions v1", REGIONS_COLUMNS, (
            (r.code, r.name, r.state, r.population, r.lat, r.lon) for r in bundle.regions)),
        "grid_to_region": _csv.write_csv(d / INPUT_FILES["grid_to_region"], "grid_to_region v1",
                                         GRID_MAP_COLUMNS, sorted(bundle.grid_to_region.items())),
        "cbg_to_region": _csv.write_csv(d / INPUT_FILES["cbg_to_region"], "cbg_to_region v1",
                                        CBG_MAP_COLUMNS, sorted(bundle.cbg_to_region.items())),
    }
    return out


@dataclass
class ValidationReport:
    orphan_pois: list[tuple[str, int]] = field(default_factory=list)
    unknown_cbgs: dict[str, int] = field(default_factory=dict)
    unknown_regions: list[str] = field(default_factory=list)
    coverage_gaps: list[tuple[str, int]] = field(default_factory=list)
    parse_errors: list[RowError] = field(default_factory=list)
    resolved_visitor_fraction: float = float("nan")
    unresolved_visitors: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def issues(self) -> list[str]:
        out = [f"orphan POI {p} in week {w}" for p, w in self.orphan_pois]
        out += [f"unknown CBG {c} ({n} visitors)" for c, n in sorted(self.unknown_cbgs.items())]
        out += [f"unknown region {r}" for r in self.unknown_regions]
        out += [f"coverage gap: region {r} has no visit rows in week {w}" for r, w in self.coverage_gaps]
        out += [str(e) for e in self.parse_errors]
        return out

    @property
    def ok(self) -> bool:
        return not self.issues

    def lines(self) -> list[str]:
        head = [f"resolved visitor fraction: {_csv.fmt(self.resolved_visitor_fraction)}",
                f"unresolved visitors: {self.unresolved_visitors}",
                f"issues: {len(self.issues)}"]
        return head + [f"ISSUE {i}" for i in self.issues] + [f"WARNING {w}" for w in self.warnings]


def validate_bundle(bundle: DatasetBundle) -> ValidationReport:
    """Report referential problems and coverage; never modifies the bundle."""
    report = ValidationReport(parse_errors=list(bundle.parse_errors))
    pois = bundle.poi_map()
    regions = bundle.region_map()
    known_cbgs = {c.cbg for c in bundle.cbgs}
    unknown = Counter()
    rows_per_region_week = defaultdict(int)
    total = resolved = 0
    for v in bundle.visits:
        poi = pois.get(v.poi_id)
        if poi is None:
            report.orphan_pois.append((v.poi_id, v.week.index))
        else:
            rows_per_region_week[(poi.region_code, v.week.index)] += 1
        total += v.total_visitors
        for c, n in v.visitors_by_cbg.items():
            resolved += n
            if c not in known_cbgs:
                unknown[c] += n
    report.unknown_cbgs = dict(unknown)
    report.unresolved_visitors = total - resolved
    report.resolved_visitor_fraction = resolved / total if total else float("nan")
    report.unknown_regions = sorted({p.region_code for p in bundle.pois if p.region_code not in regions})
    weeks = sorted({v.week.index for v in bundle.visits})
    for r in bundle.regions:
        for w in weeks:
            if rows_per_region_week.get((r.code, w), 0) == 0:
                report.coverage_gaps.append((r.code, w))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for p in bundle.pois:
            if p.region_code in regions:
                check_poi_location(p, regions[p.region_code])
    report.warnings = [str(w.message) for w in caught]
    return report
