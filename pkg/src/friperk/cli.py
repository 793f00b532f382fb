"""Command-line entry point: ``friperk {synth,estimate,sweep,bench}``.

Output files go to ``--out`` if given, else to ``$FRIPERK_OUTPUT_DIR``, else to
the config's ``output_dir`` (the current directory when there is no config).

Exit codes: 0 success, 2 configuration or input error, 3 some estimator runs
failed (results are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .channel_model import PilotMeasurements
from .estimators import ESTIMATORS, run_estimator
from .exceptions import ConfigError, FriPerkError, LayoutError, PlacementError
from .harness import (ExperimentConfig, gnuplot_script, make_trial, results_csv, run_sweep,
                      run_timing, summary_csv, timing_csv)

ENV_OUTPUT_DIR = "FRIPERK_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3

log = logging.getLogger("friperk")


def output_dir(arg, config=None) -> Path:
    if arg:
        d = arg
    elif os.environ.get(ENV_OUTPUT_DIR):
        d = os.environ[ENV_OUTPUT_DIR]
    elif config is not None:
        d = config.output_dir
    else:
        d = "."
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config(path, args=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if args is not None:
        det = cfg.detector
        for attr, name in (("L", "L"), ("eps_slope", "eps_slope"), ("k_max", "K_max"),
                           ("min_drop", "min_drop"), ("slope_tol", "slope_tol")):
            v = getattr(args, attr, None)
            if v is not None:
                setattr(det, name, v)
        cfg.validate()
    return cfg


def _write(path: Path, text: str):
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    snr = cfg.snr_db[0] if args.snr is None else args.snr
    seed = cfg.trial_seeds()[0] if args.seed is None else args.seed
    data = make_trial(cfg, snr, seed)
    out = output_dir(args.out, cfg if args.config else None)
    _write(out / "channel.json", json.dumps(data.spec.to_dict(), indent=1))
    _write(out / "measurements.json", json.dumps(data.meas.to_dict(), indent=1))
    print(f"K={data.spec.K} P={cfg.P} M={cfg.M} D={cfg.D} snr={snr:g} dB seed={seed} -> {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    try:
        with open(args.measurements) as fh:
            meas = PilotMeasurements.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise ConfigError(f"cannot read measurements {args.measurements}: {e}") from e
    cfg = _load_config(args.config, args)
    det = cfg.detector
    out = output_dir(args.out, cfg if args.config else None)
    stem = Path(args.measurements).stem
    try:
        rep = run_estimator(args.method, meas, K_max=det.K_max, L=det.L,
                            eps_slope=det.eps_slope, seed=args.seed, oversample=cfg.oversample,
                            margin=cfg.margin, dense_method=cfg.dense_method,
                            min_drop=det.min_drop, slope_tol=det.slope_tol)
    except (FriPerkError, ValueError, np.linalg.LinAlgError) as e:
        print(f"estimator {args.method} failed: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    path = out / f"{stem}_{args.method}.json"
    _write(path, json.dumps(rep.to_dict()))
    if args.plot and "per_trace" in rep.diagnostics:
        from .plotting import plot_per_trace
        plot_per_trace(rep.diagnostics["per_trace"], rep.K_hat,
                       str(out / f"{stem}_{args.method}_per.png"))
    k = "not sparse (lowpass fallback)" if rep.fallback else rep.K_hat
    print(f"{args.method}: K_hat={k} delays={np.round(rep.delays, 6).tolist()} -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args)
    out = output_dir(args.out, cfg)
    sweep = run_sweep(cfg, workers=args.workers)
    _write(out / "results.csv", results_csv(sweep, timing_columns=args.timing_columns))
    _write(out / "summary.csv", summary_csv(sweep))
    if not args.no_plots:
        from .plotting import plot_sweep
        for p in plot_sweep(sweep.summary(), str(out)):
            log.info("wrote %s", p)
    for row in sweep.summary():
        print(f"{row['estimator']:>14} snr={row['snr_db']:6.1f} ser={row['mean_ser']:.4g}"
              f" mse={row['mean_mse']:.4g} fallback={row['fallback_rate']:.2f}"
              f" K_hat~{row['median_K_hat']:g}")
    if sweep.n_failed:
        print(f"{sweep.n_failed} estimator runs failed; see the error column", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    out = output_dir(args.out, cfg)
    res = run_timing(cfg, seed=args.seed)
    _write(out / "timing.csv", timing_csv(res))
    _write(out / "timing.gp", gnuplot_script(res))
    if not args.no_plots:
        from .plotting import plot_timing
        plot_timing(res.rows, res.columns(), str(out))
    for r in res.rows:
        cells = " ".join(f"{c}={r[c]:.4g}" for c in res.columns() if c.endswith("_s"))
        print(f"N={r['N']:5d} {cells}")
    print(f"fri-perk log-log slope over the largest decade: {res.slope:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="friperk", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def detector_flags(p):
        p.add_argument("--L", type=int, help="detector look-ahead window")
        p.add_argument("--eps-slope", type=float)
        p.add_argument("--k-max", type=int)
        p.add_argument("--min-drop", type=float)
        p.add_argument("--slope-tol", type=float)

    p = sub.add_parser("synth", help="write channel and measurement JSON fixtures")
    p.add_argument("--config")
    p.add_argument("--snr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="estimate one measurement file")
    p.add_argument("measurements")
    p.add_argument("--method", choices=[e for e in ESTIMATORS if e != "truth"],
                   default="fri-perk")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="also draw the PER trace")
    p.add_argument("-o", "--out")
    detector_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", help="SER/MSE sweep from a JSON config")
    p.add_argument("config")
    p.add_argument("-o", "--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timing-columns", action="store_true",
                   help="add wall-clock per row (output is then not reproducible)")
    p.add_argument("--no-plots", action="store_true")
    detector_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="timing table and gnuplot script")
    p.add_argument("config")
    p.add_argument("-o", "--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LayoutError, PlacementError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
