"""Weather-bin panel regressions with absorbed high-dimensional fixed effects.

Fixed effects are removed by alternating weighted group demeaning (method of
alternating projections); the weather coefficients then come from weighted
least squares on the demeaned data, which is the same estimate as the dummy
variable regression.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .climate import BinSpec, ExposurePanel
from .core import Region, WeekId, calendar_week
from .isolation import IsolationPanel

log = logging.getLogger(__name__)

ABOVE, BELOW = "above", "below"


class DemeanError(RuntimeError):
    pass


class DesignError(ValueError):
    pass


def _level_key(kind: str, region: Region, week: WeekId):
    m = week.monday
    if kind == "region":
        return region.code
    if kind == "week":
        return week.index
    if kind == "state_month":
        return (region.state, m.year, m.month)
    if kind == "state_quarter":
        return (region.state, (m.month - 1) // 3 + 1)
    if kind == "state_calmonth":
        return (region.state, m.month)
    if kind == "state_calweek":
        return (region.state, calendar_week(m))
    if kind == "state":
        return region.state
    raise ValueError(f"unknown fixed-effect level {kind!r}")


@dataclass(frozen=True)
class FactorSpec:
    """Fixed-effect dimensions plus group-specific linear week trends.

    A trend entry ``"state"`` absorbs a separate intercept and slope in the week
    index for every state.
    """

    name: str
    factors: tuple[str, ...]
    trends: tuple[str, ...] = ()


FACTOR_SPECS = {
    "region_week": FactorSpec("region_week", ("region", "week")),
    "state_quarter": FactorSpec("state_quarter", ("region", "week", "state_quarter")),
    "state_calmonth": FactorSpec("state_calmonth", ("region", "week", "state_calmonth")),
    "state_month": FactorSpec("state_month", ("region", "week", "state_month")),
    "state_calweek": FactorSpec("state_calweek", ("region", "week", "state_calweek")),
    "state_trend": FactorSpec("state_trend", ("region", "week"), trends=("state",)),
}
PREFERRED = FACTOR_SPECS["state_month"]


def _dense_codes(keys) -> np.ndarray:
    index = {}
    return np.fromiter((index.setdefault(k, len(index)) for k in keys), dtype=np.int64, count=len(keys))


@dataclass
class DesignMatrix:
    columns: list[str]
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray
    factor_names: tuple[str, ...]
    levels: list[np.ndarray]
    trend_names: tuple[str, ...]
    trend_groups: list[np.ndarray]
    time: np.ndarray          # week index per row
    regions: np.ndarray       # region code per row
    lat: np.ndarray
    lon: np.ndarray
    raw_scale: np.ndarray     # ||sqrt(w) x_j|| before demeaning
    demeaned: bool = False
    sweeps: int = 0

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "DesignMatrix":
        mask = np.asarray(mask, dtype=bool)
        if self.demeaned:
            raise DesignError("subset the design before demeaning")
        X = self.X[mask]
        w = self.weights[mask]
        return replace(
            self, X=X, y=self.y[mask], weights=w,
            levels=[np.unique(g[mask], return_inverse=True)[1] for g in self.levels],
            trend_groups=[np.unique(g[mask], return_inverse=True)[1] for g in self.trend_groups],
            time=self.time[mask], regions=self.regions[mask], lat=self.lat[mask], lon=self.lon[mask],
            raw_scale=np.sqrt((w[:, None] * X**2).sum(axis=0)),
        )


def build_design(vi_panel: IsolationPanel, exposure: ExposurePanel, regions: Mapping[str, Region],
                 factors: FactorSpec = PREFERRED, split: Mapping[str, str] | None = None,
                 continuous_precip: bool = False, weighted: bool = True) -> DesignMatrix:
    """Stack region-weeks with observed isolation into a regression design.

    Reference temperature and precipitation bins are omitted. With ``split``
    (region -> ``"above"``/``"below"``) every weather column is duplicated into
    ``<label>:above`` and ``<label>:below`` copies.
    """
    spec: BinSpec = exposure.spec
    ex_r = {r: i for i, r in enumerate(exposure.regions)}
    ex_w = {w.index: j for j, w in enumerate(exposure.weeks)}
    t_keep = [b for b in range(spec.n_temp) if b != spec.reference_temp_index]
    p_keep = [b for b in range(spec.n_precip) if b != spec.reference_precip_bin]
    base_cols = [spec.temp_labels[b] for b in t_keep]
    base_cols += ["precip_mm_total"] if continuous_precip else [spec.precip_labels[b] for b in p_keep]

    rows_x, rows_y, rows_meta = [], [], []
    for i, code in enumerate(vi_panel.regions):
        if code not in ex_r or code not in regions:
            continue
        ei = ex_r[code]
        for j, week in enumerate(vi_panel.weeks):
            if vi_panel.missing[i, j] or week.index not in ex_w:
                continue
            ej = ex_w[week.index]
            h = exposure.temp[ei, ej, t_keep].astype(float)
            p = ([exposure.precip_total[ei, ej]] if continuous_precip
                 else exposure.precip[ei, ej, p_keep].astype(float))
            rows_x.append(np.concatenate([h, p]))
            rows_y.append(vi_panel.values[i, j])
            rows_meta.append((regions[code], week))
    if not rows_y:
        raise DesignError("isolation and exposure panels share no region-weeks")

    X = np.asarray(rows_x, dtype=float)
    columns = list(base_cols)
    if split is not None:
        above = np.array([split[r.code] == ABOVE for r, _ in rows_meta], dtype=float)
        X = np.hstack([X * above[:, None], X * (1.0 - above)[:, None]])
        columns = [f"{c}:{ABOVE}" for c in base_cols] + [f"{c}:{BELOW}" for c in base_cols]
    for j in np.flatnonzero(~X.any(axis=0)):
        warnings.warn(f"design column {columns[j]} is identically zero", stacklevel=2)

    w = np.array([float(r.population) if weighted else 1.0 for r, _ in rows_meta])
    levels = [_dense_codes([_level_key(k, r, wk) for r, wk in rows_meta]) for k in factors.factors]
    trends = [_dense_codes([_level_key(k, r, wk) for r, wk in rows_meta]) for k in factors.trends]
    return DesignMatrix(
        columns=columns, X=X, y=np.asarray(rows_y, dtype=float), weights=w,
        factor_names=factors.factors, levels=levels, trend_names=factors.trends, trend_groups=trends,
        time=np.array([wk.index for _, wk in rows_meta], dtype=float),
        regions=np.array([r.code for r, _ in rows_meta], dtype=object),
        lat=np.array([r.lat for r, _ in rows_meta]), lon=np.array([r.lon for r, _ in rows_meta]),
        raw_scale=np.sqrt((w[:, None] * X**2).sum(axis=0)),
    )


def _indicator(codes: np.ndarray) -> sp.csr_matrix:
    n = len(codes)
    return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, int(codes.max()) + 1 if n else 0))


def demean(design: DesignMatrix, tol: float = 1e-10, max_sweeps: int = 10_000) -> DesignMatrix:
    """Weighted within-transformation of outcome and columns over all factors and trends.

    Sweeps project out one dimension at a time in a fixed order until the
    largest absolute change in a sweep falls below ``tol``.
    """
    w = design.weights
    if w.sum() <= 0:
        raise DesignError("total regression weight is zero")
    M = np.column_stack([design.y, design.X])
    projections: list[Callable[[np.ndarray], np.ndarray]] = []
    for codes in design.levels:
        D = _indicator(codes)
        # levels absent from the rows (e.g. after subsetting) carry no mass and project to zero
        inv_mass = np.divide(1.0, D.T @ w, out=np.zeros(D.shape[1]), where=(D.T @ w) > 0)
        projections.append(lambda A, D=D, inv=inv_mass: D @ ((D.T @ (w[:, None] * A)) * inv[:, None]))
    for codes in design.trend_groups:
        D = _indicator(codes)
        mass = D.T @ w
        tbar = (D.T @ (w * design.time)) / mass
        tc = design.time - D @ tbar
        denom = D.T @ (w * tc**2)
        inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)

        def trend(A, D=D, mass=mass, tc=tc, inv=inv):
            wa = w[:, None] * A
            means = (D.T @ wa) / mass[:, None]
            slopes = (D.T @ (tc[:, None] * wa)) * inv[:, None]
            return D @ means + tc[:, None] * (D @ slopes)

        projections.append(trend)

    sweeps, delta = 0, 0.0
    if projections:
        for sweeps in range(1, max_sweeps + 1):
            delta = 0.0
            for proj in projections:
                step = proj(M)
                M = M - step
                delta = max(delta, float(np.abs(step).max(initial=0.0)))
            if delta < tol:
                break
        else:
            raise DemeanError(f"demeaning did not converge in {max_sweeps} sweeps (last change {delta:.3e})")
    log.debug("demeaned %d rows in %d sweeps", len(w), sweeps)
    return replace(design, y=M[:, 0].copy(), X=M[:, 1:].copy(), demeaned=True, sweeps=sweeps)


def keep_independent(Xs: np.ndarray, scale: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Greedy left-to-right column selection: drop columns (numerically) spanned by earlier kept ones."""
    n, k = Xs.shape
    keep = np.zeros(k, dtype=bool)
    basis = np.zeros((n, 0))
    for j in range(k):
        r = Xs[:, j].copy()
        for _ in range(2):  # re-orthogonalise once for stability
            r -= basis @ (basis.T @ r)
        norm = np.linalg.norm(r)
        if scale[j] > 0 and norm > rtol * scale[j]:
            keep[j] = True
            basis = np.column_stack([basis, r / norm])
    return keep


@dataclass
class RegressionFit:
    columns: list[str]
    beta: np.ndarray                 # NaN for dropped columns
    keep: np.ndarray
    X: np.ndarray                    # demeaned kept columns
    residuals: np.ndarray
    weights: np.ndarray
    regions: np.ndarray
    time: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    dof_resid: int
    sweeps: int = 0
    spec_id: str = ""
    dropped: list[str] = field(default_factory=list)

    @property
    def kept_columns(self) -> list[str]:
        return [c for c, k in zip(self.columns, self.keep) if k]

    @property
    def kept_beta(self) -> np.ndarray:
        return self.beta[self.keep]

    @property
    def n_obs(self) -> int:
        return len(self.residuals)

    def coef(self, column: str) -> float:
        return float(self.beta[self.columns.index(column)])


def wls_fit(design: DesignMatrix, spec_id: str = "") -> RegressionFit:
    """Weighted least squares by QR on the (demeaned) design; collinear columns are dropped leftmost-kept."""
    w = design.weights
    if w.sum() <= 0:
        raise DesignError("total regression weight is zero")
    sw = np.sqrt(w)
    Xs = sw[:, None] * design.X
    ys = sw * design.y
    keep = keep_independent(Xs, design.raw_scale)
    dropped = [c for c, k in zip(design.columns, keep) if not k]
    if dropped:
        log.warning("dropping collinear or absorbed columns: %s", ", ".join(dropped))
    beta = np.full(len(design.columns), np.nan)
    if keep.any():
        Q, R = np.linalg.qr(Xs[:, keep], mode="reduced")
        beta[keep] = scipy.linalg.solve_triangular(R, Q.T @ ys)
    Xk = design.X[:, keep]
    resid = design.y - Xk @ beta[keep]
    absorbed = sum(int(g.max()) + 1 for g in design.levels if len(g))
    absorbed -= max(len(design.levels) - 1, 0)
    absorbed += 2 * sum(int(g.max()) + 1 for g in design.trend_groups if len(g))
    return RegressionFit(
        columns=list(design.columns), beta=beta, keep=keep, X=Xk, residuals=resid, weights=w,
        regions=design.regions, time=design.time, lat=design.lat, lon=design.lon,
        dof_resid=design.n_obs - int(keep.sum()) - absorbed, sweeps=design.sweeps,
        spec_id=spec_id, dropped=dropped,
    )


def fit(design: DesignMatrix, spec_id: str = "", tol: float = 1e-10) -> RegressionFit:
    return wls_fit(demean(design, tol=tol), spec_id=spec_id)


def fit_subsamples(design: DesignMatrix, partition: Mapping[str, object], min_regions: int = 2,
                   spec_id: str = ""):
    """Separate fits per region class.

    Returns ``(fits, flagged)``: ``fits`` maps class -> :class:`RegressionFit`;
    ``flagged`` maps class -> reason for classes that were not fitted.
    """
    missing = set(design.regions) - set(partition)
    if missing:
        raise DesignError(f"partition does not cover regions {sorted(missing)[:5]}")
    classes = sorted(set(partition.values()), key=str)
    row_class = np.array([partition[r] for r in design.regions], dtype=object)
    fits, flagged = {}, {}
    for cls in classes:
        mask = row_class == cls
        n_regions = len(set(design.regions[mask]))
        if n_regions < min_regions:
            flagged[cls] = f"{n_regions} region(s); need at least {min_regions}"
            continue
        sub_id = f"{spec_id}|{cls}" if spec_id else str(cls)
        fits[cls] = fit(design.subset(mask), spec_id=sub_id)
    return fits, flagged


def weighted_median(values: Sequence[float], weights: Sequence[float]) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.size == 0:
        raise ValueError("weighted median of an empty set")
    order = np.argsort(v, kind="mergesort")
    cum = np.cumsum(w[order])
    return float(v[order][np.searchsorted(cum, cum[-1] / 2.0, side="left")])


def median_split_indicator(values: Mapping[str, float], weights: Mapping[str, float]) -> dict[str, str]:
    """Region -> ``"above"`` iff its value is strictly greater than the weighted median."""
    codes = list(values)
    med = weighted_median([values[c] for c in codes], [weights[c] for c in codes])
    return {c: ABOVE if values[c] > med else BELOW for c in codes}


def population_quartiles(regions: Sequence[Region]) -> dict[str, str]:
    """Region -> ``"q1"``..``"q4"`` by population rank (ties broken by code)."""
    ordered = sorted(regions, key=lambda r: (r.population, r.code))
    n = len(ordered)
    return {r.code: f"q{min(4, 1 + (4 * i) // n)}" for i, r in enumerate(ordered)}
