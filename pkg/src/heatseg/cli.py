"""Command-line entry point: ``heatseg <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` plus flags named after the
configuration keys (``--fixed-effects``, ``--vcov`` ...); flags override the
file. Exit status is 0 on success, 1 for a failed stage or invalid
configuration, 2 when an input file is missing.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import _csv
from .infer import COEF_COLUMNS
from .ingest import load_bundle, validate_bundle
from .isolation import read_isolation_panel, write_isolation_panel
from .climate import read_exposure_panel, write_exposure_panel, write_scenario_deltas
from .project import write_projection
from . import report as rp
from . import synth

log = logging.getLogger("heatseg")

COMMANDS = ("ingest-check", "isolation", "exposure", "fit", "project", "synth", "report", "run-all")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="INI file with [pipeline] and [scenarios] sections")
    for key in rp._KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")
    p.add_argument("--scenario", action="append", default=[], metavar="NAME=PATH",
                   help="scenario grid file (repeatable)")


def _config(args, check_files: bool) -> rp.PipelineConfig:
    overrides = {k: getattr(args, k) for k in rp._KEYS if getattr(args, k) is not None}
    scen = dict(s.split("=", 1) for s in args.scenario)
    if args.config is not None:
        cfg = rp.load_config(args.config, overrides, check_files=check_files and not scen)
        if scen:
            extra = rp.parse_config(overrides, scen, Path.cwd(), check_files=False).scenarios
            cfg = rp.PipelineConfig(**{**cfg.__dict__, "scenarios": {**cfg.scenarios, **extra}})
        return cfg
    return rp.parse_config(overrides, scen, Path.cwd(), check_files=check_files)


def _out(cfg) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def cmd_ingest_check(args) -> int:
    cfg = _config(args, check_files=False)
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    report = validate_bundle(bundle)
    for line in report.lines():
        print(line)
    rp.write_validation(report, _out(cfg))
    return 0 if report.ok else 1


def cmd_isolation(args) -> int:
    cfg = _config(args, check_files=False)
    bundle, _ = rp.stage_ingest(cfg)
    panel = rp.stage_isolation(cfg, bundle)
    path = write_isolation_panel(panel, _out(cfg) / "isolation_panel.csv")
    print(f"{path} ({len(panel.regions)} regions, {len(panel.excluded_regions)} excluded)")
    return 0


def cmd_exposure(args) -> int:
    cfg = _config(args, check_files=False)
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    panel = rp.stage_exposure(cfg, bundle)
    print(write_exposure_panel(panel, _out(cfg) / "exposure_panel.csv"))
    return 0


def _panels(cfg):
    out = cfg.output_dir
    vi = read_isolation_panel(out / "isolation_panel.csv", cfg.window)
    ex = read_exposure_panel(out / "exposure_panel.csv", cfg.bins, cfg.window)
    return vi, ex


def cmd_fit(args) -> int:
    cfg = _config(args, check_files=False)
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    vi, ex = _panels(cfg)
    clim = None
    if cfg.split == "climate-normal":
        ref = rp._region_weather(cfg.reference_grid, bundle.grid_to_region)
        clim = rp.climatology(ref, cfg.bins, cfg.reference_years, [r.code for r in bundle.regions])
    partition = rp._split_partition(cfg, bundle, clim)
    _, rows = rp.stage_fit(cfg, bundle, vi, ex, partition)
    print(_csv.write_csv(_out(cfg) / "coefficients.csv", "coefficients v1", COEF_COLUMNS, rows))
    return 0


def cmd_project(args) -> int:
    cfg = _config(args, check_files=False)
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    vi = read_isolation_panel(cfg.output_dir / "isolation_panel.csv", cfg.window)
    # nonwhite volumes are only held in memory; recompute when needed
    if cfg.volume == "nonwhite":
        vi = rp.stage_isolation(cfg, bundle)
    main = rp.read_main_coefficients(cfg.output_dir / "coefficients.csv", cfg.fixed_effects)
    _, deltas, rows = rp.stage_project(cfg, bundle, vi, main)
    out = _out(cfg)
    print(write_scenario_deltas(deltas, out / "scenario_delta.csv"))
    print(write_projection(rows, out / "projection.csv"))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args, check_files=False)
    bundle = load_bundle(cfg.input_paths(), cfg.window)
    vi = read_isolation_panel(cfg.output_dir / "isolation_panel.csv", cfg.window)
    for path in rp.write_report(cfg, bundle, vi, _out(cfg)):
        print(path)
    return 0


def cmd_run_all(args) -> int:
    cfg = _config(args, check_files=True)
    paths = rp.run_pipeline(cfg)
    for name in sorted(paths):
        print(paths[name])
    return 0


def cmd_synth(args) -> int:
    params = synth.DatasetParams(
        n_regions=args.n_regions, n_weeks=args.n_weeks, pois_per_region=args.pois_per_region,
        cbgs_per_region=args.cbgs_per_region, visits_scale=args.visits_scale, seed=args.seed,
        reference_years=(args.reference_first, args.reference_last),
    )
    paths = synth.generate_dataset(params, args.out)
    print(paths["config"])
    return 0


HANDLERS = {
    "ingest-check": cmd_ingest_check,
    "isolation": cmd_isolation,
    "exposure": cmd_exposure,
    "fit": cmd_fit,
    "project": cmd_project,
    "synth": cmd_synth,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatseg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest-check": "load inputs and report referential problems",
        "isolation": "weekly visit-isolation panel",
        "exposure": "weekly temperature and precipitation bin-day panel",
        "fit": "fixed-effects regression with the configured covariance estimators",
        "project": "scenario bin-day deltas and encounter projections",
        "synth": "write a seeded synthetic input directory with a pipeline config",
        "report": "regional summary table and smoothed weekly trend",
        "run-all": "every stage in order plus a run manifest",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        if name == "synth":
            p.add_argument("--out", type=Path, required=True)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--n-regions", type=int, default=30)
            p.add_argument("--n-weeks", type=int, default=114)
            p.add_argument("--pois-per-region", type=int, default=8)
            p.add_argument("--cbgs-per-region", type=int, default=10)
            p.add_argument("--visits-scale", type=float, default=600.0)
            p.add_argument("--reference-first", type=int, default=2015)
            p.add_argument("--reference-last", type=int, default=2016)
        else:
            _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args)
    except rp.MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return rp.EXIT_MISSING
    except FileNotFoundError as exc:
        msg = f"missing input file: {exc.filename}" if exc.filename else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return rp.EXIT_MISSING
    except rp.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return rp.EXIT_STAGE
    except (rp.ConfigError, ValueError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return rp.EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
