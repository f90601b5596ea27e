"""Sandwich covariance estimators for :class:`~heatseg.regress.RegressionFit`.

All estimators share the bread ``(X'WX)^-1`` of the demeaned design and differ
only in the meat built from the weighted scores ``s_i = w_i e_i x_i``. No
degrees-of-freedom corrections are applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .core import haversine_km
from .regress import RegressionFit

Z_975 = 1.959964


class CovarianceError(ValueError):
    pass


@dataclass(frozen=True)
class VcovSpec:
    kind: str = "conley"            # robust | cluster | conley
    cutoff_km: float = 500.0
    lag_weeks: int = 4

    def __post_init__(self):
        if self.kind not in ("robust", "cluster", "conley"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if not self.cutoff_km > 0:
            raise ValueError("Conley cutoff must be positive")
        if self.lag_weeks < 0:
            raise ValueError("Conley lag must be non-negative")

    @property
    def label(self) -> str:
        if self.kind == "conley":
            return f"conley{self.cutoff_km:g}km_lag{self.lag_weeks}"
        return self.kind


@dataclass
class CovarianceEstimate:
    matrix: np.ndarray
    columns: list[str]
    kind: str
    psd: bool = True

    @property
    def se(self) -> np.ndarray:
        d = np.diag(self.matrix)
        return np.sqrt(np.where(d >= 0, d, np.nan))


def _sym(a: np.ndarray) -> np.ndarray:
    return (a + a.T) / 2


def _scores(fit: RegressionFit) -> np.ndarray:
    return (fit.weights * fit.residuals)[:, None] * fit.X


def _bread(fit: RegressionFit) -> np.ndarray:
    xtwx = fit.X.T @ (fit.weights[:, None] * fit.X)
    try:
        return _sym(np.linalg.inv(xtwx))
    except np.linalg.LinAlgError:
        raise CovarianceError("X'WX is singular") from None


def _sandwich(fit: RegressionFit, meat: np.ndarray, kind: str) -> CovarianceEstimate:
    bread = _bread(fit)
    v = _sym(bread @ _sym(meat) @ bread)
    return CovarianceEstimate(v, fit.kept_columns, kind)


def _outer(scores: np.ndarray, smoothed: np.ndarray) -> np.ndarray:
    # fresh C-ordered buffers keep numpy on one general matmul path, so every
    # estimator reduces identical score matrices to bit-identical meats
    return np.array(scores, order="C", copy=True).T @ np.array(smoothed, order="C", copy=True)


def vcov_robust(fit: RegressionFit) -> CovarianceEstimate:
    s = _scores(fit)
    return _sandwich(fit, _outer(s, s), "robust")


def _cluster_sums(scores: np.ndarray, ids) -> np.ndarray:
    """Score sums per cluster, clusters in order of first appearance."""
    codes, uniques = pd.factorize(pd.Series(list(ids), dtype=object), sort=False)
    out = np.zeros((len(uniques), scores.shape[1]))
    np.add.at(out, codes, scores)
    return out


def _cluster_meat(scores, ids) -> tuple[np.ndarray, int]:
    sums = _cluster_sums(scores, ids)
    return _outer(sums, sums), len(sums)


def vcov_cluster_oneway(fit: RegressionFit, ids: Sequence) -> CovarianceEstimate:
    meat, g = _cluster_meat(_scores(fit), ids)
    if g < 2:
        raise CovarianceError("clustering needs at least two clusters")
    return _sandwich(fit, meat, "cluster1")


def vcov_cluster_twoway(fit: RegressionFit, cluster1: Sequence | None = None,
                        cluster2: Sequence | None = None) -> CovarianceEstimate:
    """Inclusion-exclusion two-way clustering; defaults cluster by region and by week."""
    c1 = list(fit.regions) if cluster1 is None else list(cluster1)
    c2 = list(fit.time) if cluster2 is None else list(cluster2)
    s = _scores(fit)
    m1, g1 = _cluster_meat(s, c1)
    m2, g2 = _cluster_meat(s, c2)
    if g1 < 2 or g2 < 2:
        raise CovarianceError(f"two-way clustering needs >= 2 clusters per dimension, got {g1} and {g2}")
    m12, _ = _cluster_meat(s, list(zip(c1, c2)))
    bread = _bread(fit)
    parts = [_sym(bread @ _sym(m) @ bread) for m in (m1, m2, m12)]
    v = _sym((parts[0] + parts[1]) - parts[2])
    eig = np.linalg.eigvalsh(v) if v.size else np.zeros(0)
    psd = bool(eig.size == 0 or eig.min() >= -1e-12 * max(1.0, abs(eig).max()))
    return CovarianceEstimate(v, fit.kept_columns, "cluster", psd=psd)


def bartlett(x, bandwidth):
    """``max(0, 1 - x / bandwidth)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.maximum(0.0, 1.0 - np.asarray(x, dtype=float) / bandwidth)


def vcov_conley(fit: RegressionFit, cutoff_km: float = 500.0, lag_weeks: int = 4) -> CovarianceEstimate:
    """Spatial-temporal HAC with product Bartlett kernels.

    The meat is ``sum_ij k_s(d_ij) k_t(|t_i - t_j|) s_i s_j'`` over all pairs of
    observations, with ``d_ij`` the great-circle distance between region
    centroids, ``k_s(d) = max(0, 1 - d/cutoff)`` and
    ``k_t(h) = max(0, 1 - h/(lag+1))``. The pair sum is evaluated on the
    region x week grid as a spatial then temporal kernel smoothing of the
    scores, so the cost is quadratic in regions and weeks separately rather
    than in observations.
    """
    if not cutoff_km > 0 or lag_weeks < 0:
        raise CovarianceError("Conley needs cutoff_km > 0 and lag_weeks >= 0")
    if not (np.isfinite(fit.lat).all() and np.isfinite(fit.lon).all()):
        raise CovarianceError("Conley needs coordinates for every observation")
    s = _scores(fit)
    r_codes, first, r_idx = np.unique(np.asarray(fit.regions, dtype=str), return_index=True,
                                      return_inverse=True)
    t_vals, t_idx = np.unique(fit.time, return_inverse=True)
    if len(set(zip(r_idx.tolist(), t_idx.tolist()))) != len(r_idx):
        raise CovarianceError("Conley requires one observation per region-week")
    n_r, n_t, k = len(r_codes), len(t_vals), s.shape[1]
    lat, lon = fit.lat[first], fit.lon[first]
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    k_s = bartlett(dist, cutoff_km)
    k_t = bartlett(np.abs(t_vals[:, None] - t_vals[None, :]), lag_weeks + 1)

    grid = np.zeros((n_r, n_t, k))
    grid[r_idx, t_idx] = s
    smoothed = np.einsum("rq,qtk->rtk", k_s, grid)
    smoothed = np.einsum("ts,rsk->rtk", k_t, smoothed)
    meat = _outer(s, smoothed[r_idx, t_idx])
    return _sandwich(fit, meat, "conley")


def vcov(fit: RegressionFit, spec: VcovSpec) -> CovarianceEstimate:
    if spec.kind == "robust":
        return vcov_robust(fit)
    if spec.kind == "cluster":
        return vcov_cluster_twoway(fit)
    return vcov_conley(fit, spec.cutoff_km, spec.lag_weeks)


@dataclass
class Interval:
    low: float
    high: float
    valid: bool = True


def confidence_intervals(fit: RegressionFit, cov: CovarianceEstimate, level: float = 0.95) -> list[Interval]:
    """Normal intervals ``beta +/- z * se`` for the kept columns; a negative variance marks the interval invalid."""
    if level == 0.95:
        z = Z_975
    else:
        from scipy.stats import norm

        z = float(norm.ppf(0.5 + level / 2))
    out = []
    for b, v in zip(fit.kept_beta, np.diag(cov.matrix)):
        if v < 0 or not math.isfinite(v):
            out.append(Interval(math.nan, math.nan, valid=False))
            continue
        half = z * math.sqrt(v)
        out.append(Interval(b - half, b + half))
    return out


COEF_COLUMNS = ("spec_id", "column", "beta", "se", "ci_low", "ci_high")


def coefficient_rows(fit: RegressionFit, cov: CovarianceEstimate, spec_id: str):
    """Rows for ``coefficients.csv``; dropped columns appear with NaN statistics."""
    cis = dict(zip(fit.kept_columns, confidence_intervals(fit, cov)))
    se = dict(zip(fit.kept_columns, cov.se))
    for col, b in zip(fit.columns, fit.beta):
        ci = cis.get(col)
        yield (spec_id, col, float(b), float(se.get(col, math.nan)),
               ci.low if ci else math.nan, ci.high if ci else math.nan)
