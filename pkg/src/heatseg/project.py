"""Encounter changes implied by fitted bin coefficients and scenario bin-day deltas."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

from . import _csv
from .climate import ScenarioDelta
from .core import WEEKS_PER_YEAR
from .regress import RegressionFit

log = logging.getLogger(__name__)


class BinMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RegionActivity:
    region: str
    mean_weekly_visits: float
    devices: float
    population: int
    mean_weekly_nonwhite_visits: float | None = None

    def __post_init__(self):
        if self.devices <= 0:
            raise ValueError(f"region {self.region}: devices must be positive")
        if self.mean_weekly_visits < 0 or self.population <= 0:
            raise ValueError(f"region {self.region}: visits and population must be positive")
        if self.devices > self.population:
            log.warning("region %s has more devices (%g) than residents (%d)", self.region,
                        self.devices, self.population)


@dataclass(frozen=True)
class EncounterProjection:
    """One region under one scenario; negative changes are foregone between-group encounters."""

    region: str
    scenario: str
    delta_vi_weekly: float
    per_capita_change_yr: float
    total_change_yr: float

    @property
    def total_decrease_yr(self) -> float:
        return -self.total_change_yr


def project_vi_shift(beta: Mapping[str, float], delta: Mapping[str, float], reference: str) -> float:
    """Weekly isolation shift ``sum_b beta_b * delta_days_b``; the reference bin has coefficient 0."""
    total = 0.0
    for label, d in delta.items():
        if label == reference:
            continue
        if label not in beta:
            raise BinMismatch(f"no coefficient for bin {label}")
        b = beta[label]
        if math.isnan(b):
            if d != 0:
                log.warning("bin %s was dropped from the fit; its delta %g is ignored", label, d)
            continue
        total += b * d
    return total


def encounters_change(shift: float, activity: RegionActivity, scenario: str = "",
                      weeks_per_year: int = WEEKS_PER_YEAR, volume: str = "total") -> EncounterProjection:
    """Annual change in between-group encounters per person and in total.

    ``volume`` picks the visit volume the isolation shift applies to:
    ``"total"`` (all visits) or ``"nonwhite"`` (estimated NonWhite resident visits).
    """
    if volume == "total":
        visits = activity.mean_weekly_visits
    elif volume == "nonwhite":
        if activity.mean_weekly_nonwhite_visits is None:
            raise ValueError(f"region {activity.region}: no NonWhite visit volume available")
        visits = activity.mean_weekly_nonwhite_visits
    else:
        raise ValueError(f"unknown visit volume {volume!r}")
    if activity.devices <= 0:
        raise ValueError("devices must be positive")
    per_capita = -shift * visits * weeks_per_year / activity.devices
    return EncounterProjection(activity.region, scenario, shift, per_capita, per_capita * activity.population)


def beta_by_label(fit: RegressionFit) -> dict[str, float]:
    return {c: float(b) for c, b in zip(fit.columns, fit.beta)}


def project(beta: Mapping[str, float], deltas: Sequence[ScenarioDelta], activity: Mapping[str, RegionActivity],
            reference: str, volume: str = "total") -> list[EncounterProjection]:
    out = []
    for d in deltas:
        for i, region in enumerate(d.regions):
            if region not in activity:
                continue
            shift = project_vi_shift(beta, dict(zip(d.labels, d.delta[i])), reference)
            out.append(encounters_change(shift, activity[region], d.scenario, volume=volume))
    return out


def mean_weekly_visits(bundle, weeks=None) -> dict[str, float]:
    """Sample-mean weekly total visits per region over all POIs."""
    region_of = {p.poi_id: p.region_code for p in bundle.pois}
    weeks = {w.index for w in (weeks or bundle.weeks())}
    sums: dict[str, float] = {}
    for v in bundle.visits:
        r = region_of.get(v.poi_id)
        if r is not None and v.week.index in weeks:
            sums[r] = sums.get(r, 0.0) + v.total_visits
    return {r: s / len(weeks) for r, s in sums.items()} if weeks else {}


PROJECTION_COLUMNS = ("region_code", "scenario", "delta_vi_weekly", "per_capita_change_yr",
                      "total_change_yr", "total_decrease_yr")


def write_projection(rows: Sequence[EncounterProjection], path):
    return _csv.write_csv(path, "projection v1", PROJECTION_COLUMNS, (
        (p.region, p.scenario, p.delta_vi_weekly, p.per_capita_change_yr, p.total_change_yr,
         p.total_decrease_yr) for p in rows))


def read_devices(path) -> dict[str, float]:
    frame = _csv.read_frame(path, ("region_code", "devices"), dtype={"region_code": str})
    return dict(zip(frame["region_code"], frame["devices"].astype(float)))


def dallas_calibration() -> dict:
    """Shipped calibration instance for the Dallas row of the top-ten encounter table."""
    text = resources.files("heatseg").joinpath("data/dallas_calibration.json").read_text()
    return json.loads(text)


def run_dallas_calibration() -> dict[str, EncounterProjection]:
    cal = dallas_calibration()
    act = RegionActivity(cal["region"]["code"], cal["activity"]["mean_weekly_visits"],
                         cal["activity"]["devices"], cal["region"]["population"])
    out = {}
    for scenario, delta in cal["deltas"].items():
        shift = project_vi_shift(cal["beta"], delta, cal["reference_bin"])
        out[scenario] = encounters_change(shift, act, scenario)
    return out

