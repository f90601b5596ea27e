import pytest

from heatseg import _csv
from heatseg.core import SampleWindow
from heatseg.ingest import (
    INPUT_FILES,
    load_bundle,
    parse_cbgs,
    parse_visits,
    validate_bundle,
    write_bundle,
)

HEADER = "poi_id,week_monday,total_visits,total_visitors,visitors_by_cbg\n"


def _visits(tmp_path, body):
    p = tmp_path / "visits.csv"
    p.write_text(HEADER + body)
    return p


def test_parse_visits_decodes_map(tmp_path):
    p = _visits(tmp_path, 'p1,2018-01-01,20,10,"{""360470001001"":4,""360470002001"":6}"\n')
    recs, errors = parse_visits(p)
    assert not errors
    (r,) = recs
    assert (r.total_visits, r.total_visitors) == (20, 10)
    assert r.visitors_by_cbg == {"360470001001": 4, "360470002001": 6}
    assert r.week.index == 1


def test_parse_visits_row_errors(tmp_path):
    body = (
        "p1,2018-01-01,5,10,{}\n"          # visits below visitors
        "p2,2018-01-01,-1,0,{}\n"          # negative
        "p3,2018-01-02,5,3,{}\n"           # not a Monday
        "p4,2018-01-01,5,3,{}\n"
        "p4,2018-01-01,6,3,{}\n"           # duplicate
        "p5,2018-01-01,5,3,{\"12\":1}\n"   # bad CBG code
        "p6,2018-01-01,5,3,\n"             # empty map: valid, all unresolved
    )
    recs, errors = parse_visits(_visits(tmp_path, body))
    assert [r.poi_id for r in recs] == ["p4", "p6"]
    assert [e.line for e in errors] == [2, 3, 4, 6, 7]
    assert recs[1].unresolved_visitors == 3


def test_missing_column_is_schema_error(tmp_path):
    p = tmp_path / "visits.csv"
    p.write_text("poi_id,week_monday,total_visits\np1,2018-01-01,3\n")
    with pytest.raises(_csv.SchemaError):
        parse_visits(p)


def test_parse_cbgs_optional_region(tmp_path):
    p = tmp_path / "cbgs.csv"
    p.write_text("cbg,total_pop,white_pop\n480000000001,10,6\n")
    recs, errors = parse_cbgs(p)
    assert not errors and recs[0].region_code is None


def test_round_trip_is_byte_identical(tmp_path, toy_bundle):
    window = SampleWindow(n_weeks=4)
    first = write_bundle(toy_bundle, tmp_path / "a")
    loaded = load_bundle(tmp_path / "a", window)
    assert not loaded.parse_errors
    second = write_bundle(loaded, tmp_path / "b")
    for key in INPUT_FILES:
        assert first[key].read_bytes() == second[key].read_bytes()
        assert first[key].read_bytes().startswith(b"#schema: ")


def test_load_missing_file(tmp_path, toy_bundle):
    write_bundle(toy_bundle, tmp_path)
    (tmp_path / "pois.csv").unlink()
    with pytest.raises(FileNotFoundError, match="pois.csv"):
        load_bundle(tmp_path)


def test_validate_clean(toy_bundle):
    report = validate_bundle(toy_bundle)
    assert report.ok and report.issues == []
    # 25 of 28 visitors resolve each week
    assert report.resolved_visitor_fraction == pytest.approx(25 / 28)
    assert report.unresolved_visitors == 6


def test_validate_orphan_and_gap(toy_bundle, window):
    from conftest import record

    visits = [v for v in toy_bundle.visits if not (v.poi_id == "c" and v.week.index == 2)]
    visits.append(record("zzz", 1, 3, 3, {}))
    report = validate_bundle(toy_bundle.replace(visits=visits))
    assert report.orphan_pois == [("zzz", 1)]
    assert report.coverage_gaps == [("20000", 2)]
    assert len(report.issues) == 2


def test_validate_unknown_cbg_and_purity(toy_bundle):
    from conftest import record

    visits = list(toy_bundle.visits) + [record("a", 3, 4, 4, {"480000000777": 2})]
    bundle = toy_bundle.replace(visits=visits)
    before = list(bundle.visits)
    r1, r2 = validate_bundle(bundle), validate_bundle(bundle)
    assert r1.unknown_cbgs == {"480000000777": 2}
    assert r1.issues == r2.issues
    assert bundle.visits == before
