"""Pipeline configuration, orchestration and plot-ready summaries."""

from __future__ import annotations

import configparser
import datetime as dt
import hashlib
import json
import logging
import math
import platform
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
import scipy

from . import __version__, _csv
from .climate import (
    BinSpec,
    aggregate_to_region,
    climatology,
    exposure_panel,
    read_exposure_panel,
    read_grid_daily,
    scenario_delta,
    write_exposure_panel,
    write_scenario_deltas,
)
from .core import DEVICES_PER_PERSON, Category, SampleWindow
from .infer import COEF_COLUMNS, VcovSpec, coefficient_rows, vcov
from .ingest import INPUT_FILES, load_bundle, validate_bundle
from .isolation import (
    IsolationPanel,
    build_isolation_panel,
    cbg_labels,
    filter_by_category,
    read_isolation_panel,
    write_isolation_panel,
)
from .project import RegionActivity, beta_by_label, mean_weekly_visits, project, read_devices, write_projection
from .regress import (
    FACTOR_SPECS,
    build_design,
    fit,
    fit_subsamples,
    median_split_indicator,
    population_quartiles,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_STAGE, EXIT_MISSING = 0, 1, 2
SPLITS = ("none", "climate-normal", "income", "population-quartiles")
VOLUMES = ("total", "nonwhite")


class ConfigError(ValueError):
    pass


class MissingInput(ConfigError):
    def __init__(self, path):
        super().__init__(f"missing input file: {path}")
        self.path = Path(path)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.replace(",", " ").split() if x)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# key -> (parser, default); ``None`` default marks an optional path
_KEYS: dict[str, tuple[Callable[[str], object], object]] = {
    "input_dir": (str, "."),
    "grid_daily": (str, "grid_daily.csv"),
    "reference_grid": (str, "reference_grid.csv"),
    "devices": (str, "region_devices.csv"),
    "income": (str, None),
    "cbg_devices": (str, None),
    "sample_start": (dt.date.fromisoformat, SampleWindow().start),
    "n_weeks": (int, SampleWindow().n_weeks),
    "temp_edges": (_floats, BinSpec().temp_edges),
    "reference_temp_bin": (_floats, BinSpec().reference_temp_bin),
    "precip_edges": (_floats, BinSpec().precip_edges),
    "reference_years": (lambda s: tuple(int(x) for x in _words(s)), (1987, 2017)),
    "scenario_year": (int, 2050),
    "fixed_effects": (str, "state_month"),
    "vcov": (_words, ("conley",)),
    "conley_cutoff_km": (float, 500.0),
    "conley_lag_weeks": (int, 4),
    "split": (str, "none"),
    "categories": (_words, ()),
    "continuous_precip": (_bool, False),
    "weighted": (_bool, True),
    "volume": (str, "total"),
    "loess_span": (float, 0.6),
    "output_dir": (str, "out"),
}


@dataclass(frozen=True)
class PipelineConfig:
    input_dir: Path
    grid_daily: Path
    reference_grid: Path
    scenarios: dict[str, Path]
    output_dir: Path
    devices: Path | None = None
    income: Path | None = None
    cbg_devices: Path | None = None
    window: SampleWindow = field(default_factory=SampleWindow)
    bins: BinSpec = field(default_factory=BinSpec)
    reference_years: tuple[int, int] = (1987, 2017)
    scenario_year: int = 2050
    fixed_effects: str = "state_month"
    vcov: tuple[VcovSpec, ...] = (VcovSpec(),)
    split: str = "none"
    categories: tuple[str, ...] = ()
    continuous_precip: bool = False
    weighted: bool = True
    volume: str = "total"
    loess_span: float = 0.6
    digest: str = ""

    def input_paths(self) -> dict[str, Path]:
        return {k: self.input_dir / v for k, v in INPUT_FILES.items()}

    def referenced_files(self) -> list[Path]:
        files = [p for k, p in self.input_paths().items() if k not in ("grid_to_region", "cbg_to_region")]
        files += [self.input_dir / INPUT_FILES["grid_to_region"], self.grid_daily, self.reference_grid]
        files += list(self.scenarios.values())
        files += [p for p in (self.devices, self.income, self.cbg_devices) if p is not None]
        return files


def parse_config(values: Mapping[str, str], scenarios: Mapping[str, str], base: Path,
                 digest: str = "", check_files: bool = True) -> PipelineConfig:
    """Build a :class:`PipelineConfig` from raw key-value strings; paths resolve against ``base``."""
    unknown = set(values) - set(_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    raw = {}
    for key, (parse, default) in _KEYS.items():
        if key in values and str(values[key]).strip() != "":
            try:
                raw[key] = parse(str(values[key]).strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            raw[key] = default
    input_dir = (base / raw["input_dir"]).resolve() if not Path(raw["input_dir"]).is_absolute() \
        else Path(raw["input_dir"])

    def in_path(v):
        return None if v is None else (Path(v) if Path(v).is_absolute() else input_dir / v)

    if raw["fixed_effects"] not in FACTOR_SPECS:
        raise ConfigError(f"fixed_effects must be one of {', '.join(FACTOR_SPECS)}")
    if raw["split"] not in SPLITS:
        raise ConfigError(f"split must be one of {', '.join(SPLITS)}")
    if raw["volume"] not in VOLUMES:
        raise ConfigError(f"volume must be one of {', '.join(VOLUMES)}")
    if len(raw["reference_years"]) != 2 or len(raw["reference_temp_bin"]) != 2:
        raise ConfigError("reference_years and reference_temp_bin take two values each")
    for c in raw["categories"]:
        try:
            Category(c)
        except ValueError:
            raise ConfigError(f"unknown category {c!r}") from None
    try:
        vc = tuple(VcovSpec(k, raw["conley_cutoff_km"], raw["conley_lag_weeks"]) for k in raw["vcov"])
        bins = BinSpec(raw["temp_edges"], tuple(raw["reference_temp_bin"]), raw["precip_edges"])
        window = SampleWindow(raw["sample_start"], raw["n_weeks"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out_dir = Path(raw["output_dir"])
    cfg = PipelineConfig(
        input_dir=input_dir,
        grid_daily=in_path(raw["grid_daily"]),
        reference_grid=in_path(raw["reference_grid"]),
        scenarios={k: in_path(v) for k, v in sorted(scenarios.items())},
        output_dir=out_dir if out_dir.is_absolute() else (base / out_dir).resolve(),
        devices=in_path(raw["devices"]),
        income=in_path(raw["income"]),
        cbg_devices=in_path(raw["cbg_devices"]),
        window=window, bins=bins,
        reference_years=tuple(raw["reference_years"]), scenario_year=raw["scenario_year"],
        fixed_effects=raw["fixed_effects"], vcov=vc, split=raw["split"], categories=raw["categories"],
        continuous_precip=raw["continuous_precip"], weighted=raw["weighted"], volume=raw["volume"],
        loess_span=raw["loess_span"], digest=digest,
    )
    if cfg.split == "income" and cfg.income is None:
        raise ConfigError("split = income needs an income file")
    if check_files:
        for p in cfg.referenced_files():
            if not p.is_file():
                raise MissingInput(p)
    return cfg


def load_config(path, overrides: Mapping[str, str] | None = None, check_files: bool = True) -> PipelineConfig:
    """Read an INI file with a ``[pipeline]`` section and an optional ``[scenarios]`` section.

    Unknown sections and keys are rejected; ``overrides`` (e.g. from CLI flags)
    replace file values before validation.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingInput(path)
    data = path.read_bytes()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    try:
        parser.read_string(data.decode("utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    extra = set(parser.sections()) - {"pipeline", "scenarios"}
    if extra:
        raise ConfigError(f"unknown configuration section(s): {', '.join(sorted(extra))}")
    values = dict(parser["pipeline"]) if parser.has_section("pipeline") else {}
    scen = dict(parser["scenarios"]) if parser.has_section("scenarios") else {}
    digest = hashlib.sha256(data).hexdigest()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
        # the output location does not affect results, so it stays out of the hash
        hashed = sorted((k, v) for k, v in overrides.items() if v is not None and k != "output_dir")
        if hashed:
            digest = hashlib.sha256(data + json.dumps(hashed, default=str).encode()).hexdigest()
    return parse_config(values, scen, path.parent.resolve(), digest, check_files)


def loess_trend(series: Mapping[float, float] | pd.Series, span: float = 0.6, degree: int = 2) -> pd.Series:
    """Local polynomial smoother evaluated at every input point.

    Each target uses the ``ceil(span * n)`` nearest points; their distances are
    scaled by the largest of them and weighted by the tricube
    ``(1 - u^3)^3``, so the farthest neighbour carries zero weight.
    """
    s = pd.Series(series, dtype=float).dropna().sort_index()
    x = s.index.to_numpy(dtype=float)
    y = s.to_numpy()
    n = len(y)
    if not 0 < span <= 1:
        raise ValueError(f"span must lie in (0, 1], got {span}")
    q = math.ceil(span * n)
    if n < degree + 2 or q < degree + 2:
        raise ValueError(f"LOESS with degree {degree} needs at least {degree + 2} points in each window "
                         f"(have {n} points, window {q})")
    fitted = np.empty(n)
    for i, x0 in enumerate(x):
        d = np.abs(x - x0)
        h = np.partition(d, q - 1)[q - 1]
        u = d / h if h > 0 else np.where(d > 0, 1.0, 0.0)
        w = np.where(u < 1, (1 - u**3) ** 3, 0.0)
        sel = w > 0
        z = (x[sel] - x0) / (h if h > 0 else 1.0)
        A = np.vander(z, degree + 1, increasing=True)
        sw = np.sqrt(w[sel])
        coef, *_ = np.linalg.lstsq(sw[:, None] * A, sw * y[sel], rcond=None)
        fitted[i] = coef[0]
    return pd.Series(fitted, index=s.index)


REPRESENTATIVENESS_COLUMNS = ("bucket", "device_total", "census_total", "device_scaled", "ratio")


def representativeness(device_counts: Mapping[str, float], census_var: Mapping[str, float],
                       bucketing: Mapping[str, str] | Callable[[str], str],
                       buckets: Sequence[str] | None = None) -> pd.DataFrame:
    """Per-bucket device and census totals for diagonal comparison plots.

    ``device_scaled`` rescales device totals so both series have the same
    grand total; ``ratio`` is ``device_scaled / census_total`` and is 1 for
    a perfectly representative sample. Buckets named in ``buckets`` but
    holding no CBGs appear with zeros.
    """
    cbgs = sorted(set(device_counts) | set(census_var))
    key = bucketing if callable(bucketing) else (lambda c: bucketing.get(c))
    frame = pd.DataFrame({
        "bucket": [key(c) for c in cbgs],
        "device_total": [float(device_counts.get(c, 0.0)) for c in cbgs],
        "census_total": [float(census_var.get(c, 0.0)) for c in cbgs],
    }).dropna(subset=["bucket"])
    out = frame.groupby("bucket", sort=True)[["device_total", "census_total"]].sum()
    if buckets is not None:
        out = out.reindex(list(buckets), fill_value=0.0)
    dev, cen = out["device_total"].sum(), out["census_total"].sum()
    out["device_scaled"] = out["device_total"] * (cen / dev if dev > 0 else 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["ratio"] = out["device_scaled"] / out["census_total"]
    return out.reset_index()


SUMMARY_COLUMNS = ("region_code", "mean_vi", "n_weeks", "excluded")


def summarize_panel(panel: IsolationPanel) -> pd.DataFrame:
    """Mean isolation per region over non-missing weeks; excluded regions get ``excluded = 1`` and NaN."""
    observed = ~panel.missing
    n = observed.sum(axis=1)
    sums = np.where(observed, panel.values, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(n > 0, sums / np.maximum(n, 1), np.nan)
    rows = [(r, float(m), int(k), 0) for r, m, k in zip(panel.regions, means, n)]
    rows += [(r, math.nan, 0, 1) for r in sorted(panel.excluded_regions)]
    return pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))


def weekly_mean_vi(panel: IsolationPanel, weights: Mapping[str, float] | None = None) -> pd.Series:
    """Cross-region (optionally weighted) mean isolation per week index."""
    w = np.array([1.0 if weights is None else float(weights[r]) for r in panel.regions])
    obs = ~panel.missing
    num = (np.where(obs, panel.values, 0.0) * w[:, None]).sum(axis=0)
    den = (obs * w[:, None]).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(den > 0, num / den, np.nan)
    return pd.Series(vals, index=[wk.index for wk in panel.weeks])


def _frame_rows(frame: pd.DataFrame):
    return frame.itertuples(index=False, name=None)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class _Stages:
    cfg: PipelineConfig
    out: Path
    written: list[Path] = field(default_factory=list)

    def write(self, path: Path) -> Path:
        self.written.append(path)
        return path


def _run(stage: str, func, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except (StageError, MissingInput):
        raise
    except FileNotFoundError as exc:
        raise MissingInput(exc.filename or str(exc).split(": ")[-1]) from None
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def stage_ingest(cfg: PipelineConfig):
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    report = validate_bundle(bundle)
    for line in report.lines():
        log.info("ingest: %s", line)
    return bundle, report


def stage_isolation(cfg: PipelineConfig, bundle):
    panel = build_isolation_panel(bundle, weeks=cfg.window.weeks())
    if cfg.categories:
        sub = build_isolation_panel(filter_by_category(bundle, cfg.categories), weeks=cfg.window.weeks(),
                                    exclude=False)
        keep = [sub.regions.index(r) for r in panel.regions]
        panel = IsolationPanel(panel.regions, sub.weeks, sub.values[keep], sub.missing[keep],
                               panel.excluded_regions, sub.inconsistent_poi_weeks, sub.unclassifiable_cbgs,
                               sub.white_visits[keep], sub.nonwhite_visits[keep])
    return panel


def _region_weather(path: Path, grid_map: Mapping[str, str]):
    return aggregate_to_region(read_grid_daily(path), grid_map)


def stage_exposure(cfg: PipelineConfig, bundle):
    if not bundle.grid_to_region:
        raise ValueError("grid_to_region mapping is empty")
    days = _region_weather(cfg.grid_daily, bundle.grid_to_region)
    return exposure_panel(days, cfg.bins, cfg.window, regions=[r.code for r in bundle.regions])


def _split_partition(cfg: PipelineConfig, bundle, clim) -> dict[str, str] | None:
    regions = bundle.regions
    pop = {r.code: float(r.population) for r in regions}
    if cfg.split == "climate-normal":
        # mean annual days at or above the reference bin's upper edge
        hot = [b for b, (lo, _) in enumerate(cfg.bins.temp_bounds) if lo >= cfg.bins.reference_temp_bin[1]]
        annual = clim.annual()[:, hot].sum(axis=1)
        values = dict(zip(clim.regions, annual))
        return median_split_indicator({r: values[r] for r in pop}, pop)
    if cfg.split == "income":
        frame = _csv.read_frame(cfg.income, ("region_code", "income_per_capita"), dtype={"region_code": str})
        values = dict(zip(frame["region_code"], frame["income_per_capita"].astype(float)))
        missing = set(pop) - set(values)
        if missing:
            raise ValueError(f"income missing for regions {sorted(missing)[:5]}")
        return median_split_indicator({r: values[r] for r in pop}, pop)
    if cfg.split == "population-quartiles":
        return population_quartiles(regions)
    return None


def stage_fit(cfg: PipelineConfig, bundle, panel, exposure, partition):
    regions = bundle.region_map()
    factors = FACTOR_SPECS[cfg.fixed_effects]
    design = build_design(panel, exposure, regions, factors, continuous_precip=cfg.continuous_precip,
                          weighted=cfg.weighted)
    fits = [fit(design, spec_id=cfg.fixed_effects)]
    if partition is not None and cfg.split in ("climate-normal", "income"):
        split_design = build_design(panel, exposure, regions, factors, split=partition,
                                    continuous_precip=cfg.continuous_precip, weighted=cfg.weighted)
        fits.append(fit(split_design, spec_id=f"{cfg.fixed_effects}|split={cfg.split}"))
    elif partition is not None:
        sub, flagged = fit_subsamples(design, partition, spec_id=cfg.fixed_effects)
        for cls, reason in flagged.items():
            log.warning("subsample %s not fitted: %s", cls, reason)
        fits.extend(sub[k] for k in sorted(sub))
    rows = []
    for f in fits:
        for spec in cfg.vcov:
            cov = vcov(f, spec)
            rows.extend(coefficient_rows(f, cov, f"{f.spec_id}|{spec.label}"))
    return fits, rows


def stage_project(cfg: PipelineConfig, bundle, panel, main_fit):
    grid_map = bundle.grid_to_region
    codes = [r.code for r in bundle.regions]
    ref_days = _region_weather(cfg.reference_grid, grid_map)
    clim = climatology(ref_days, cfg.bins, cfg.reference_years, regions=codes)
    deltas = []
    for name, path in cfg.scenarios.items():
        scen_days = _region_weather(path, grid_map)
        deltas.append(scenario_delta(scen_days, clim, cfg.bins, cfg.scenario_year, name))
    devices = read_devices(cfg.devices) if cfg.devices is not None else {}
    visits = mean_weekly_visits(bundle, cfg.window.weeks())
    nonwhite = {}
    if panel.nonwhite_visits is not None:
        nonwhite = dict(zip(panel.regions, panel.nonwhite_visits.mean(axis=1)))
    activity = {}
    for r in bundle.regions:
        if r.code not in panel.regions:
            continue
        dev = devices.get(r.code, DEVICES_PER_PERSON * r.population)
        activity[r.code] = RegionActivity(r.code, visits.get(r.code, 0.0), dev, r.population,
                                          nonwhite.get(r.code))
    reference = cfg.bins.temp_labels[cfg.bins.reference_temp_index]
    rows = project(beta_by_label(main_fit), deltas, activity, reference, cfg.volume)
    return clim, deltas, rows


def _cbg_devices(path: Path) -> dict[str, float]:
    frame = _csv.read_frame(path, ("cbg", "devices"), dtype={"cbg": str})
    return dict(zip(frame["cbg"], frame["devices"].astype(float)))


def write_manifest(cfg: PipelineConfig, stages: _Stages, extra: Mapping[str, object]) -> Path:
    """Config hash, library versions and output checksums; no timestamps, so reruns are byte-identical."""
    manifest = {
        "config_sha256": cfg.digest,
        "versions": {
            "heatseg": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "outputs": {p.name: _sha256(p) for p in sorted(stages.written)},
        **extra,
    }
    path = stages.out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


class CoefficientView:
    """Point estimates of one specification read back from ``coefficients.csv``."""

    def __init__(self, columns, beta):
        self.columns, self.beta = list(columns), list(beta)


def read_main_coefficients(path, spec_prefix: str) -> CoefficientView:
    """Pooled fit of ``spec_prefix``: the first block whose id is ``<prefix>|<vcov>``."""
    frame = _csv.read_frame(path, COEF_COLUMNS, dtype={"spec_id": str, "column": str})
    first = next((s for s in frame["spec_id"] if s.split("|")[0] == spec_prefix and s.count("|") == 1), None)
    if first is None:
        raise ValueError(f"{path}: no coefficients for specification {spec_prefix}")
    rows = frame[frame["spec_id"] == first]
    return CoefficientView(rows["column"], [float(b) for b in rows["beta"]])


def write_validation(report, out: Path) -> Path:
    return _csv.write_csv(out / "validation.csv", "validation v1", ("message",), [(line,) for line in report.lines()])


def write_report(cfg: PipelineConfig, bundle, panel: IsolationPanel, out: Path) -> list[Path]:
    """Region summary, smoothed weekly trend and (when CBG device counts are configured) representativeness."""
    paths = []
    summary = _run("report", summarize_panel, panel)
    paths.append(_csv.write_csv(out / "region_summary.csv", "region_summary v1", SUMMARY_COLUMNS,
                                _frame_rows(summary)))
    pop = {r.code: float(r.population) for r in bundle.regions}
    weekly = weekly_mean_vi(panel, pop if cfg.weighted else None)
    trend = _run("report", loess_trend, weekly, cfg.loess_span)
    week_mon = {w.index: w.monday.isoformat() for w in panel.weeks}
    paths.append(_csv.write_csv(out / "vi_trend.csv", "vi_trend v1", ("week_monday", "mean_vi", "loess"), (
        (week_mon[k], float(weekly[k]), float(trend.get(k, math.nan))) for k in weekly.index)))
    if cfg.cbg_devices is not None:
        labels = cbg_labels(bundle.cbgs)
        census = {c.cbg: c.total_pop for c in bundle.cbgs}
        rep = _run("report", representativeness, _run("report", _cbg_devices, cfg.cbg_devices), census,
                   {c: g.value for c, g in labels.items()}, ["NonWhite", "White"])
        paths.append(_csv.write_csv(out / "representativeness.csv", "representativeness v1",
                                    REPRESENTATIVENESS_COLUMNS, _frame_rows(rep)))
    return paths


def run_pipeline(cfg: PipelineConfig) -> dict[str, Path]:
    """Every stage in order; outputs land in ``cfg.output_dir``.

    Downstream stages read the panels and coefficients back from the files
    just written, so a run-all and a stage-by-stage run see identical inputs
    and produce identical bytes.

    Raises :class:`StageError` tagged with the failing stage, or
    :class:`MissingInput` naming an absent file.
    """
    for p in cfg.referenced_files():
        if not p.is_file():
            raise MissingInput(p)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    st = _Stages(cfg, out)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        bundle, report = _run("ingest", stage_ingest, cfg)
        st.write(write_validation(report, out))
        live = _run("isolation", stage_isolation, cfg, bundle)
        path = st.write(write_isolation_panel(live, out / "isolation_panel.csv"))
        panel = _run("isolation", read_isolation_panel, path, cfg.window)
        exposure = _run("exposure", stage_exposure, cfg, bundle)
        path = st.write(write_exposure_panel(exposure, out / "exposure_panel.csv"))
        exposure = _run("exposure", read_exposure_panel, path, cfg.bins, cfg.window)

        clim = None
        if cfg.split == "climate-normal":
            ref = _run("fit", _region_weather, cfg.reference_grid, bundle.grid_to_region)
            clim = _run("fit", climatology, ref, cfg.bins, cfg.reference_years,
                        [r.code for r in bundle.regions])
        partition = _run("fit", _split_partition, cfg, bundle, clim)
        fits, coef_rows = _run("fit", stage_fit, cfg, bundle, panel, exposure, partition)
        path = st.write(_csv.write_csv(out / "coefficients.csv", "coefficients v1", COEF_COLUMNS, coef_rows))
        main = _run("project", read_main_coefficients, path, cfg.fixed_effects)

        # the live panel carries the NonWhite visit volumes that the CSV does not
        _, deltas, proj = _run("project", stage_project, cfg, bundle, live, main)
        st.write(write_scenario_deltas(deltas, out / "scenario_delta.csv"))
        st.write(write_projection(proj, out / "projection.csv"))
        for p in write_report(cfg, bundle, panel, out):
            st.write(p)
    write_manifest(cfg, st, {
        "n_regions": len(panel.regions),
        "excluded_regions": sorted(live.excluded_regions),
        "n_obs": int(fits[0].n_obs),
        "dropped_columns": list(fits[0].dropped),
        "demean_sweeps": int(fits[0].sweeps),
    })
    return {p.stem: p for p in st.written} | {"manifest": out / "manifest.json"}
