"""Shared domain types, identifiers and calendar conventions."""

from __future__ import annotations

import datetime as dt
import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

SAMPLE_START = dt.date(2018, 1, 1)
SAMPLE_WEEKS = 114
WEEKS_PER_YEAR = 52
DEVICES_PER_PERSON = 0.052

# 50 states, DC and Puerto Rico
STATE_FIPS = frozenset(
    "01 02 04 05 06 08 09 10 11 12 13 15 16 17 18 19 20 21 22 23 24 25 26 27 28 "
    "29 30 31 32 33 34 35 36 37 38 39 40 41 42 44 45 46 47 48 49 50 51 53 54 55 "
    "56 72".split()
)


class GroupLabel(str, enum.Enum):
    WHITE = "White"
    NONWHITE = "NonWhite"


class Category(str, enum.Enum):
    OUTDOOR_LEISURE = "OutdoorLeisure"
    INDOOR_LEISURE = "IndoorLeisure"
    GROCERY = "Grocery"
    OTHER = "Other"


DEFAULT_CATEGORY_MAP: Mapping[str, Category] = {
    **{c: Category.OUTDOOR_LEISURE for c in ("712190", "713110", "713910", "713990")},
    **{c: Category.INDOOR_LEISURE for c in ("512131", "713940", "722410", "722511")},
    "445110": Category.GROCERY,
}


class Unclassifiable(ValueError):
    """A census block group with zero population cannot be given a group label."""


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Region:
    code: str
    name: str
    state: str
    population: int
    lat: float
    lon: float

    def __post_init__(self):
        if self.population <= 0:
            raise ValueError(f"region {self.code}: population must be positive")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"region {self.code}: centroid ({self.lat}, {self.lon}) out of range")
        if len(self.state) != 2:
            raise ValueError(f"region {self.code}: state must be a 2-letter code")

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.lat, self.lon)


def first_listed_state(name: str) -> str:
    """State of a census-style area name, e.g. ``"Kansas City, MO-KS"`` -> ``"MO"``."""
    _, _, states = name.rpartition(",")
    return states.strip().split("-")[0].strip()


@dataclass(frozen=True, slots=True, order=True)
class WeekId:
    index: int
    monday: dt.date


@dataclass(frozen=True)
class SampleWindow:
    """Consecutive Monday-to-Sunday weeks starting at ``start``."""

    start: dt.date = SAMPLE_START
    n_weeks: int = SAMPLE_WEEKS

    def __post_init__(self):
        if self.start.weekday() != 0:
            raise ValueError(f"sample start {self.start} is not a Monday")
        if self.n_weeks < 1:
            raise ValueError("sample window needs at least one week")

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=7 * self.n_weeks - 1)

    def week(self, index: int) -> WeekId:
        if not 1 <= index <= self.n_weeks:
            raise OutOfRange(f"week index {index} outside 1..{self.n_weeks}")
        return WeekId(index, self.start + dt.timedelta(days=7 * (index - 1)))

    def weeks(self) -> list[WeekId]:
        return [self.week(i) for i in range(1, self.n_weeks + 1)]

    def week_of(self, date: dt.date) -> WeekId:
        if not self.start <= date <= self.end:
            raise OutOfRange(f"{date} outside sample window {self.start}..{self.end}")
        return self.week((date - self.start).days // 7 + 1)


DEFAULT_WINDOW = SampleWindow()


def week_of(date: dt.date, window: SampleWindow = DEFAULT_WINDOW) -> WeekId:
    return window.week_of(date)


def calendar_week(date: dt.date) -> int:
    """Week-of-year 1..52 counted in 7-day blocks from January 1 (days 365/366 fold into 52)."""
    return min((date.timetuple().tm_yday - 1) // 7 + 1, WEEKS_PER_YEAR)


def cbg_id(code: str) -> str:
    """Validate a 12-digit census block group code and return it unchanged."""
    if len(code) != 12 or not code.isdigit():
        raise ValueError(f"CBG code {code!r} is not 12 digits")
    if code[:2] not in STATE_FIPS:
        raise ValueError(f"CBG code {code!r} has unknown state FIPS {code[:2]}")
    return code


@dataclass(frozen=True, slots=True)
class PoiRecord:
    poi_id: str
    region_code: str
    naics: str
    lat: float
    lon: float
    category: Category = Category.OTHER

    @classmethod
    def from_naics(cls, poi_id, region_code, naics, lat, lon,
                   category_map: Mapping[str, Category] = DEFAULT_CATEGORY_MAP):
        return cls(poi_id, region_code, naics, lat, lon, categorize(naics, category_map))


def categorize(naics: str, category_map: Mapping[str, Category] = DEFAULT_CATEGORY_MAP) -> Category:
    return category_map.get(naics, Category.OTHER)


@dataclass(frozen=True, slots=True)
class WeeklyVisitRecord:
    poi_id: str
    week: WeekId
    total_visits: int
    total_visitors: int
    visitors_by_cbg: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_visits < 0 or self.total_visitors < 0:
            raise ValueError(f"{self.poi_id}/{self.week.monday}: negative counts")
        if self.total_visits < self.total_visitors:
            raise ValueError(
                f"{self.poi_id}/{self.week.monday}: visits {self.total_visits} < visitors {self.total_visitors}"
            )
        if any(n <= 0 for n in self.visitors_by_cbg.values()):
            raise ValueError(f"{self.poi_id}/{self.week.monday}: CBG visitor counts must be positive")
        resolved = sum(self.visitors_by_cbg.values())
        if resolved > self.total_visitors:
            raise ValueError(
                f"{self.poi_id}/{self.week.monday}: CBG visitors {resolved} exceed total visitors {self.total_visitors}"
            )

    @property
    def unresolved_visitors(self) -> int:
        return self.total_visitors - sum(self.visitors_by_cbg.values())


@dataclass(frozen=True, slots=True)
class CbgProfile:
    cbg: str
    total_pop: int
    white_pop: int
    region_code: str | None = None

    def __post_init__(self):
        if self.total_pop < 0 or self.white_pop < 0:
            raise ValueError(f"CBG {self.cbg}: negative population")
        if self.white_pop > self.total_pop:
            raise ValueError(f"CBG {self.cbg}: white_pop exceeds total_pop")


def classify_cbg(profile: CbgProfile) -> GroupLabel:
    """White iff the White population is a strict majority; a 50% tie is NonWhite."""
    if profile.total_pop == 0:
        raise Unclassifiable(f"CBG {profile.cbg} has zero population")
    if 2 * profile.white_pop > profile.total_pop:
        return GroupLabel.WHITE
    return GroupLabel.NONWHITE


def haversine_km(lat1, lon1, lat2, lon2, radius: float = 6371.0088):
    """Great-circle distance; broadcasts over numpy arrays."""
    import numpy as np

    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def check_poi_location(poi: PoiRecord, region: Region, max_km: float = 150.0) -> bool:
    """Warn (never raise) when a POI sits implausibly far from its region centroid."""
    d = float(haversine_km(poi.lat, poi.lon, region.lat, region.lon))
    if not math.isfinite(d) or d > max_km:
        warnings.warn(f"POI {poi.poi_id} is {d:.0f} km from the centroid of {region.code}", stacklevel=2)
        return False
    return True
