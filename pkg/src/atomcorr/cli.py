"""Command-line interface: ``atomcorr simulate|correlate|reference|bench``.

Exit codes
----------
0  success
2  configuration or usage error
3  file I/O error
4  peak fit failed (outputs are still written)
5  malformed or unusable event data
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from ._validation import ConfigurationError, DataError
from .config import load_config, parse_config
from .core import Shot
from .correlator import HistogramSpec, NormalizationError, pair_histogram
from .io import format_summary, read_events, write_events, write_histogram, write_slices, write_summary
from .pipeline import correlate_shots, default_histogram_spec, format_reference, halo_slices, reference_table, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FIT = 4
EXIT_DATA = 5


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _overrides(args):
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key.path=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    for flag, key in (("seed", "master_seed"), ("n_jobs", "n_jobs"), ("n_shots", "n_shots"), ("experiment", "experiment")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _load(args, experiment=None):
    overrides = _overrides(args)
    if args.config:
        return load_config(args.config, overrides)
    if experiment is not None:
        overrides.setdefault("experiment", experiment)
    return parse_config("", overrides)


def _output_path(config, args):
    if args.output:
        return args.output
    return os.path.join(config.output.directory, config.output.events)


def cmd_simulate(args):
    config = _load(args)
    out_path = _output_path(config, args)
    run = simulate(config)
    write_events(
        out_path, run.shots, config.experiment, config.digest(),
        extra={"master_seed": config.master_seed, "v_arrival": config.detector.v_arrival,
               "t_ref": config.detector.t_ref},
    )
    summary = dict(run.summary)
    summary["events_file"] = out_path
    if config.experiment == "halo" and config.halo.slices.enabled:
        sid = config.halo.slices.shot_id
        shot = next((s for s in run.shots if s.shot_id == sid), None)
        if shot is not None:
            directory = os.path.join(config.output.directory, f"slices_shot{sid}")
            write_slices(directory, halo_slices(config, shot))
            summary["slices_directory"] = directory
    summary_path = args.summary or os.path.join(config.output.directory, config.output.summary)
    write_summary(summary_path, "simulation summary", summary)
    if not args.quiet:
        sys.stdout.write(format_summary("simulation summary", summary))
    return EXIT_OK


def _with_correlate(config, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return config
    return config.replace(correlate=dataclasses.replace(config.correlate, **changes))


def _correlation_spec(config, args):
    config = _with_correlate(
        config,
        coordinates=args.coordinates,
        longitudinal="t" if args.time_axis else None,
        axes=tuple(a.strip() for a in args.axes.split(",")) if args.axes else None,
        half_range=_floats(args.half_range) if args.half_range else None,
        bin_width=_floats(args.bin_width) if args.bin_width else None,
    )
    return default_histogram_spec(config)


def cmd_correlate(args):
    events = read_events(args.events)
    if events.n_events == 0:
        raise DataError(f"{args.events}: file contains no events")
    experiment = events.header.get("experiment") or "hbt_boson"
    if not args.config:
        sys.stderr.write(f"note: no --config given; using default settings for {experiment!r}\n")
    config = _load(args, experiment=experiment)
    if args.config and events.config_digest and events.config_digest != config.digest():
        sys.stderr.write(
            "WARNING: CONFIG DIGEST MISMATCH\n"
            f"  event file {args.events} was produced by config {events.config_digest}\n"
            f"  but {args.config} has digest {config.digest()}\n"
            "  reference values and derived histogram ranges may not match the data.\n"
        )
    config = _with_correlate(config, mixing_factor=args.mixing_factor, fit_method=args.fit_method)
    spec = _correlation_spec(config, args)
    fit = False if args.no_fit else None
    out = correlate_shots(config, events.shots, spec, engine=args.engine, fit=fit)
    os.makedirs(args.output_dir, exist_ok=True)
    prefix = os.path.join(args.output_dir, args.prefix)
    write_histogram(prefix + "_histogram.csv", out["histogram"], out["result"],
                    {"config_digest": events.config_digest or ""})
    gfit = out["fit"]
    summary = {
        "events_file": args.events,
        "experiment": experiment,
        "engine": args.engine or config.correlate.engine,
        "spec": spec.to_dict(),
        "n_shots": out["histogram"].n_shots,
        "n_events_used": int(sum(len(s) for s in out["shots_used"])),
        "same_shot_pairs": int(out["histogram"].same_shot_counts.sum()),
        "mixed_pairs": int(out["histogram"].mixed_counts.sum()),
        "fit": gfit.to_dict() if gfit is not None else None,
        "signal_to_noise": out["snr"],
    }
    write_summary(prefix + "_summary.txt", "correlation summary", summary)
    if not args.quiet:
        sys.stdout.write(format_summary("correlation summary", summary))
    if gfit is not None and not gfit.converged:
        sys.stderr.write(f"error: peak fit failed: {gfit.message}\n")
        return EXIT_FIT
    return EXIT_OK


def cmd_reference(args):
    config = _load(args)
    rows = reference_table(config)
    if args.json:
        sys.stdout.write(json.dumps({name: value for name, value, _ in rows}, indent=2) + "\n")
    else:
        sys.stdout.write(format_reference(rows))
    return EXIT_OK


def _random_shots(rng, n_shots, per_shot, extent):
    shots = []
    for i in range(n_shots):
        n = int(rng.poisson(per_shot))
        pos = rng.normal(0.0, extent, (n, 3))
        shots.append(Shot(i, pos[:, 2], pos[:, 0], pos[:, 1], pos[:, 2]))
    return shots


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    extent = 1e-2
    window = args.window_fraction * 6.0 * extent
    spec = HistogramSpec(axes=("x", "y", "z"), half_range=(window,) * 3, bin_width=(window / 10,) * 3)
    shots = _random_shots(rng, args.n_shots, args.events_per_shot, extent)
    n_events = sum(len(s) for s in shots)
    timings = {}
    hists = {}
    for engine in ("fast", "naive"):
        t0 = time.perf_counter()
        hists[engine] = pair_histogram(shots, spec, engine=engine, mixing_factor=args.mixing_factor, n_jobs=args.n_jobs)
        timings[engine] = time.perf_counter() - t0
    equal = bool(
        np.array_equal(hists["fast"].same_shot_counts, hists["naive"].same_shot_counts)
        and np.array_equal(hists["fast"].mixed_counts, hists["naive"].mixed_counts)
    )
    report = {
        "n_events": n_events,
        "n_shots": args.n_shots,
        "window_m": window,
        "fast_s": timings["fast"],
        "naive_s": timings["naive"],
        "speedup": timings["naive"] / timings["fast"] if timings["fast"] > 0 else float("inf"),
        "identical": equal,
    }
    failures = 0
    if args.oracle_trials:
        for trial in range(args.oracle_trials):
            k = int(rng.integers(1, 6))
            size = int(np.exp(rng.uniform(0, np.log(args.oracle_max_events))))
            trial_shots = _random_shots(rng, k, max(size // k, 0), extent)
            h = float(rng.uniform(0.05, 1.0)) * extent
            tspec = HistogramSpec(axes=("x", "y", "z"), half_range=(h,) * 3, bin_width=(h / 7,) * 3)
            a = pair_histogram(trial_shots, tspec, engine="fast", mixing_factor=2)
            b = pair_histogram(trial_shots, tspec, engine="naive", mixing_factor=2)
            if not (np.array_equal(a.same_shot_counts, b.same_shot_counts)
                    and np.array_equal(a.mixed_counts, b.mixed_counts)):
                failures += 1
        report["oracle_trials"] = args.oracle_trials
        report["oracle_failures"] = failures
    sys.stdout.write(format_summary("pair counter benchmark", report))
    return EXIT_OK if equal and failures == 0 else EXIT_DATA


def build_parser():
    parser = argparse.ArgumentParser(prog="atomcorr", description="Simulate and correlate atom-counting experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--n-jobs", type=int, help="worker processes (output does not depend on it)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field, e.g. --set detector.sigma_xy=1e-4")

    p = sub.add_parser("simulate", help="run an experiment and write an event file")
    config_flags(p)
    p.add_argument("--n-shots", type=int, help="override n_shots")
    p.add_argument("--experiment", choices=("hbt_boson", "hbt_fermion", "halo", "fano_demo"))
    p.add_argument("--output", "-o", help="event file path (default: output.directory/output.events)")
    p.add_argument("--summary", help="summary text path (a .json sibling is written too)")
    p.add_argument("--quiet", "-q", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="pair histograms, g2 and peak fit of an event file")
    p.add_argument("events", help="event file written by simulate")
    config_flags(p)
    p.add_argument("--engine", choices=("fast", "naive"))
    p.add_argument("--time-axis", action="store_true", help="bin raw arrival-time differences instead of z")
    p.add_argument("--coordinates", choices=("difference", "sum"))
    p.add_argument("--axes", help="comma-separated axes, e.g. x,y,z or r")
    p.add_argument("--half-range", help="comma-separated half ranges (m, or s for the time axis)")
    p.add_argument("--bin-width", help="comma-separated bin widths")
    p.add_argument("--mixing-factor", type=int)
    p.add_argument("--fit-method", choices=("ratio", "excess"))
    p.add_argument("--no-fit", action="store_true")
    p.add_argument("--output-dir", default=".")
    p.add_argument("--prefix", default="correlation")
    p.add_argument("--quiet", "-q", action="store_true")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("reference", help="print analytic predictions for a configuration")
    config_flags(p)
    p.add_argument("--experiment", choices=("hbt_boson", "hbt_fermion", "halo", "fano_demo"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("bench", help="time the fast and naive pair counters and check they agree")
    p.add_argument("--n-shots", type=int, default=100)
    p.add_argument("--events-per-shot", type=float, default=1000.0)
    p.add_argument("--window-fraction", type=float, default=0.01, help="window half range over cloud extent")
    p.add_argument("--mixing-factor", type=int, default=1)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--oracle-trials", type=int, default=0)
    p.add_argument("--oracle-max-events", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, NormalizationError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except ConfigurationError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
