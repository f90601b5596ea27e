"""Visit-isolation index between White and NonWhite visits.

For POI ``l`` in region ``m`` the estimated visits of group ``g`` are the
group's visitors scaled by the POI's visits per visitor ``t_V / t_N``. The
index for a region-week is

    sum_l (w_lm / W) * (w_l / t_l)  -  sum_l (nw_lm / NW) * (w_l / t_l)

where ``w_lm``, ``nw_lm`` count only visitors living in ``m`` while the share
factor ``w_l / t_l`` counts White visitors from anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _csv
from .core import Category, GroupLabel, Unclassifiable, WeekId, WeeklyVisitRecord, classify_cbg
from .ingest import DatasetBundle


class InconsistentCounts(ValueError):
    """A POI-week reports visits but no visitors."""


@dataclass(frozen=True)
class GroupVisitShares:
    """Estimated visits by group at one or more POIs (arrays aligned on POI)."""

    white: np.ndarray
    nonwhite: np.ndarray
    white_resident: np.ndarray
    nonwhite_resident: np.ndarray
    total: np.ndarray
    white_share: np.ndarray | None = None   # white / total, formed from counts with one rounding

    _FIELDS = ("white", "nonwhite", "white_resident", "nonwhite_resident", "total", "white_share")

    def share(self) -> np.ndarray:
        if self.white_share is not None:
            return np.asarray(self.white_share, dtype=float)
        t = np.asarray(self.total, dtype=float)
        return np.divide(self.white, t, out=np.zeros_like(t), where=t > 0)

    @classmethod
    def concat(cls, items: Iterable["GroupVisitShares"]) -> "GroupVisitShares":
        items = list(items)
        if not items:
            empty = np.zeros(0)
            return cls(empty, empty, empty, empty, empty, empty)
        parts = {f: np.concatenate([np.atleast_1d(getattr(s, f)) for s in items]) for f in cls._FIELDS[:5]}
        parts["white_share"] = np.concatenate([np.atleast_1d(s.share()) for s in items])
        return cls(**parts)


def cbg_labels(cbgs) -> dict[str, GroupLabel]:
    """Group label per CBG; zero-population CBGs are left out (they join no group)."""
    out = {}
    for profile in cbgs:
        try:
            out[profile.cbg] = classify_cbg(profile)
        except Unclassifiable:
            continue
    return out


def impute_group_visits(record: WeeklyVisitRecord, labels: Mapping[str, GroupLabel],
                        residency: Mapping[str, str | None], home_region: str) -> GroupVisitShares:
    if record.total_visitors == 0 and record.total_visits > 0:
        raise InconsistentCounts(
            f"{record.poi_id} week {record.week.index}: {record.total_visits} visits but no visitors")
    # integer visitor tallies first, one scaling per group: exact when all visitors share a group
    w = nw = w_res = nw_res = 0
    for cbg, n in record.visitors_by_cbg.items():
        label = labels.get(cbg)
        if label is None:
            continue
        resident = residency.get(cbg) == home_region
        if label is GroupLabel.WHITE:
            w += n
            w_res += n * resident
        else:
            nw += n
            nw_res += n * resident
    t_v, t_n = record.total_visits, record.total_visitors

    def scale(count):
        return np.array([count * t_v / t_n if t_n else 0.0])

    share = np.array([w / t_n if t_n else 0.0])
    return GroupVisitShares(scale(w), scale(nw), scale(w_res), scale(nw_res), np.array([float(t_v)]), share)


def _share_mean(a, share) -> float:
    """Weighted mean of ``share`` under weights ``a``, anchored at the first positive weight.

    Anchoring returns a constant share exactly, whatever the weights.
    """
    mass = a.sum()
    if mass <= 0:
        return math.nan
    anchor = share[np.flatnonzero(a > 0)[0]]
    return float(anchor + np.sum(a * (share - anchor)) / mass)


def exposure(a_resident, b_all, total) -> float:
    """Visit-weighted exposure of resident group-a visits to the group-b share; NaN if group a is empty."""
    a = np.asarray(a_resident, dtype=float)
    b = np.asarray(b_all, dtype=float)
    t = np.asarray(total, dtype=float)
    keep = t > 0
    return _share_mean(a[keep], b[keep] / t[keep])


def visit_isolation(shares: GroupVisitShares | Sequence[GroupVisitShares]) -> float:
    """White-to-White minus NonWhite-to-White exposure; NaN when either resident group has no visits."""
    if not isinstance(shares, GroupVisitShares):
        shares = GroupVisitShares.concat(shares)
    keep = np.asarray(shares.total, dtype=float) > 0
    share = shares.share()[keep]
    e_ww = _share_mean(np.asarray(shares.white_resident, dtype=float)[keep], share)
    e_nw = _share_mean(np.asarray(shares.nonwhite_resident, dtype=float)[keep], share)
    return e_ww - e_nw


def region_week_isolation(bundle: DatasetBundle, region: str, week: int) -> float:
    """Direct per-record computation for one region-week (reference path for the panel builder)."""
    pois = {p.poi_id for p in bundle.pois if p.region_code == region}
    labels = cbg_labels(bundle.cbgs)
    residency = bundle.residency()
    shares = []
    for rec in bundle.visits:
        if rec.poi_id in pois and rec.week.index == week:
            try:
                shares.append(impute_group_visits(rec, labels, residency, region))
            except InconsistentCounts:
                continue
    return visit_isolation(shares)


@dataclass
class IsolationPanel:
    regions: list[str]
    weeks: list[WeekId]
    values: np.ndarray
    missing: np.ndarray
    excluded_regions: frozenset[str] = frozenset()
    inconsistent_poi_weeks: int = 0
    unclassifiable_cbgs: int = 0
    white_visits: np.ndarray | None = field(default=None, repr=False)
    nonwhite_visits: np.ndarray | None = field(default=None, repr=False)

    def value(self, region: str, week_index: int) -> float:
        i = self.regions.index(region)
        j = [w.index for w in self.weeks].index(week_index)
        return float(self.values[i, j])

    def rows(self):
        for i, r in enumerate(self.regions):
            for j, w in enumerate(self.weeks):
                yield r, w, float(self.values[i, j]), bool(self.missing[i, j])


def _anchored_means(key, weight, value, mass, size) -> np.ndarray:
    """Per-key weighted mean of ``value``, anchored at the key's first positive-weight entry."""
    pos = np.flatnonzero(weight > 0)
    anchor = np.zeros(size)
    keys, first = np.unique(key[pos], return_index=True)
    anchor[keys] = value[pos[first]]
    dev = np.bincount(key, weight * (value - anchor[key]), minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        return anchor + dev / mass


def build_isolation_panel(bundle: DatasetBundle, weeks: Sequence[WeekId] | None = None,
                          exclude: bool = True) -> IsolationPanel:
    """Visit isolation for every region-week.

    With ``exclude`` set, a region lacking estimated resident NonWhite visits in
    any week is dropped entirely. Remaining gaps (no White visits) stay as
    missing cells.
    """
    regions = [r.code for r in bundle.regions]
    region_pos = {r: i for i, r in enumerate(regions)}
    weeks = sorted(weeks) if weeks is not None else bundle.weeks()
    week_pos = {w.index: j for j, w in enumerate(weeks)}
    n_r, n_w = len(regions), len(weeks)
    poi_region = {p.poi_id: region_pos.get(p.region_code) for p in bundle.pois}

    labels = cbg_labels(bundle.cbgs)
    unclassifiable = sum(1 for c in bundle.cbgs if c.total_pop == 0)
    residency = bundle.residency()
    cbg_code = {}
    for c, label in labels.items():
        home = region_pos.get(residency.get(c))
        cbg_code[c] = (label is GroupLabel.WHITE, -1 if home is None else home)

    rec_key, rec_region, t_v, t_n = [], [], [], []
    ent_rec, ent_n, ent_white, ent_home = [], [], [], []
    for rec in bundle.visits:
        ri = poi_region.get(rec.poi_id)
        wj = week_pos.get(rec.week.index)
        if ri is None or wj is None:
            continue
        k = len(rec_key)
        rec_key.append(ri * n_w + wj)
        rec_region.append(ri)
        t_v.append(rec.total_visits)
        t_n.append(rec.total_visitors)
        for c, n in rec.visitors_by_cbg.items():
            code = cbg_code.get(c)
            if code is None:
                continue
            ent_rec.append(k)
            ent_n.append(n)
            ent_white.append(code[0])
            ent_home.append(code[1])

    n_rec = len(rec_key)
    rec_key = np.asarray(rec_key, dtype=np.int64)
    rec_region = np.asarray(rec_region, dtype=np.int64)
    t_v = np.asarray(t_v, dtype=float)
    t_n = np.asarray(t_n, dtype=float)
    bad = (t_n == 0) & (t_v > 0)

    ent_rec = np.asarray(ent_rec, dtype=np.int64)
    ent_white = np.asarray(ent_white, dtype=bool)
    ent_n = np.asarray(ent_n, dtype=float)
    resident = np.asarray(ent_home, dtype=np.int64) == rec_region[ent_rec]

    def scaled(mask):
        return np.bincount(ent_rec, ent_n * mask, minlength=n_rec) * t_v / np.where(t_n > 0, t_n, 1.0)

    w_res = scaled(ent_white & resident)
    nw_res = scaled(~ent_white & resident)
    w_res[bad] = 0.0
    nw_res[bad] = 0.0
    # White share of all visits: (w t_V / t_N) / t_V, formed as w / t_N with a single rounding
    w_count = np.bincount(ent_rec, ent_n * ent_white, minlength=n_rec)
    share = np.divide(w_count, t_n, out=np.zeros(n_rec), where=(t_n > 0) & (t_v > 0))
    size = n_r * n_w
    tot_w = np.bincount(rec_key, w_res, minlength=size)
    tot_nw = np.bincount(rec_key, nw_res, minlength=size)
    e_w = _anchored_means(rec_key, w_res, share, tot_w, size)
    e_nw = _anchored_means(rec_key, nw_res, share, tot_nw, size)
    values = (e_w - e_nw).reshape(n_r, n_w)
    tot_w = tot_w.reshape(n_r, n_w)
    tot_nw = tot_nw.reshape(n_r, n_w)
    missing = (tot_w <= 0) | (tot_nw <= 0)
    values[missing] = np.nan

    keep = np.ones(n_r, dtype=bool)
    if exclude and n_w:
        keep = ~(tot_nw <= 0).any(axis=1)
    excluded = frozenset(r for r, k in zip(regions, keep) if not k)
    return IsolationPanel(
        regions=[r for r, k in zip(regions, keep) if k],
        weeks=list(weeks),
        values=values[keep],
        missing=missing[keep],
        excluded_regions=excluded,
        inconsistent_poi_weeks=int(bad.sum()),
        unclassifiable_cbgs=unclassifiable,
        white_visits=tot_w[keep],
        nonwhite_visits=tot_nw[keep],
    )


def filter_by_category(bundle: DatasetBundle, categories: Iterable[Category | str]) -> DatasetBundle:
    cats = {Category(c) for c in categories}
    if not cats:
        raise ValueError("category filter must name at least one category")
    pois = [p for p in bundle.pois if p.category in cats]
    keep = {p.poi_id for p in pois}
    return bundle.replace(pois=pois, visits=[v for v in bundle.visits if v.poi_id in keep])


PANEL_COLUMNS = ("region_code", "week_monday", "vi", "missing")


def write_isolation_panel(panel: IsolationPanel, path):
    return _csv.write_csv(path, "isolation_panel v1", PANEL_COLUMNS, (
        (r, w.monday.isoformat(), "" if miss else v, int(miss)) for r, w, v, miss in panel.rows()))


def read_isolation_panel(path, window) -> IsolationPanel:
    import datetime as dt

    frame = _csv.read_frame(path, PANEL_COLUMNS, dtype={"region_code": str, "week_monday": str})
    regions = list(dict.fromkeys(frame["region_code"]))
    weeks = sorted({window.week_of(dt.date.fromisoformat(m)) for m in frame["week_monday"]})
    ri = {r: i for i, r in enumerate(regions)}
    wj = {w.monday.isoformat(): j for j, w in enumerate(weeks)}
    values = np.full((len(regions), len(weeks)), np.nan)
    missing = np.ones_like(values, dtype=bool)
    for r, m, v, miss in frame.itertuples(index=False):
        i, j = ri[r], wj[m]
        missing[i, j] = bool(miss)
        values[i, j] = np.nan if miss else float(v)
    return IsolationPanel(regions, weeks, values, missing)
