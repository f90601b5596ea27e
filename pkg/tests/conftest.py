import datetime as dt

import pytest

from heatseg.core import CbgProfile, PoiRecord, Region, SampleWindow, WeeklyVisitRecord
from heatseg.ingest import DatasetBundle

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _criteria[n] = (title, "FAIL" if call.excinfo is not None else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, outcome = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} [{outcome}] {title}")


WINDOW = SampleWindow(dt.date(2018, 1, 1), 4)


def make_region(code="10000", state="TX", pop=100_000, lat=32.0, lon=-97.0):
    return Region(code, f"Test Metro {code}, {state}", state, pop, lat, lon)


def record(poi, week, t_v, t_n, by_cbg):
    return WeeklyVisitRecord(poi, WINDOW.week(week), t_v, t_n, dict(by_cbg))


@pytest.fixture
def window():
    return WINDOW


@pytest.fixture
def toy_bundle():
    """Two regions, three POIs, four home CBGs and one outside CBG over two weeks."""
    regions = [make_region("10000"), make_region("20000", "OK", 50_000, 35.5, -97.5)]
    pois = [
        PoiRecord.from_naics("a", "10000", "712190", 32.01, -97.01),
        PoiRecord.from_naics("b", "10000", "445110", 32.02, -97.02),
        PoiRecord.from_naics("c", "20000", "722511", 35.5, -97.5),
    ]
    cbgs = [
        CbgProfile("480000000001", 100, 80, "10000"),
        CbgProfile("480000000002", 100, 20, "10000"),
        CbgProfile("400000000001", 100, 70, "20000"),
        CbgProfile("400000000002", 100, 10, "20000"),
        CbgProfile("480000000009", 100, 90, None),
    ]
    visits = []
    for w in (1, 2):
        visits += [
            record("a", w, 20, 10, {"480000000001": 6, "480000000002": 2, "480000000009": 1}),
            record("b", w, 12, 12, {"480000000001": 2, "480000000002": 8}),
            record("c", w, 9, 6, {"400000000001": 3, "400000000002": 3}),
        ]
    return DatasetBundle(pois, visits, cbgs, regions, {"g1": "10000", "g2": "20000"},
                         {c.cbg: c.region_code for c in cbgs if c.region_code})
