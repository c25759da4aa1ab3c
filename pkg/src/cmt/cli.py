"""Command-line entry point: ``cmt run``, ``cmt report`` and ``cmt sweep``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, load_grid
from .core import CMTError
from .report import ReportError, report, write_sweep_summary
from .runner import EXIT_CONVERGED, EXIT_ERROR, EXIT_MAX_STEPS, run


SWEEP_METRICS = (
    "converged", "n_steps", "ess_reverse_frac", "eubo", "elbo", "elbo_clipped", "log_z_hat",
    "log_z_se", "mode_mass_tv", "hist2d_tv",
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmt", description="Constrained mass transport runs and reports.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every annealing step")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one annealing job and write its report")
    r.add_argument("--config", required=True, type=Path)
    r.add_argument("--seed", type=int, help="override loop.seed")
    r.add_argument("--out", type=Path, help="override output.run_dir")

    rep = sub.add_parser("report", help="(re)build the summary of a finished run")
    rep.add_argument("--out", required=True, type=Path, help="run directory")

    s = sub.add_parser("sweep", help="Cartesian sweep over a grid of config values")
    s.add_argument("--config", required=True, type=Path, help="base config")
    s.add_argument("--grid", required=True, type=Path, help="dotted keys mapped to lists of values")
    s.add_argument("--out", type=Path, help="sweep directory (default: output.run_dir of the base config)")
    return p


def _run_one(cfg) -> int:
    metrics = run(cfg)
    report(cfg.output.run_dir)
    status = "converged" if metrics.converged else "hit max_steps"
    print(
        f"{cfg.output.run_dir}: {status} after {metrics.n_steps} steps; "
        f"mode TV {metrics.mode_mass_tv:.4f}, reverse ESS {metrics.ess_reverse_frac:.4f}, "
        f"log Z {metrics.log_z_hat:.4f} +- {metrics.log_z_se:.4f}"
    )
    return metrics.exit_code


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["loop.seed"] = args.seed
    if args.out is not None:
        overrides["output.run_dir"] = str(args.out)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return _run_one(cfg)


def cmd_report(args) -> int:
    out = report(args.out)
    print(out["summary"])
    print(out["final_metrics"])
    for f in out["figures"]:
        print(f)
    return 0


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    grid = load_grid(args.grid)
    root = Path(args.out or base.output.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    # validate every point before spending time on any run
    configs = []
    for n, values in enumerate(points):
        overrides = dict(zip(keys, values))
        overrides["output.run_dir"] = str(root / f"point_{n:03d}")
        configs.append((overrides, base.with_overrides(overrides)))

    rows, codes = [], []
    for overrides, cfg in configs:
        row = {"run_dir": cfg.output.run_dir, **{k: overrides[k] for k in keys}}
        try:
            code = _run_one(cfg)
            final_path = Path(cfg.output.run_dir) / "final_metrics.json"
            final = json.loads(final_path.read_text(encoding="utf-8"))
            row.update({k: final.get(k) for k in SWEEP_METRICS})
        except CMTError as exc:
            print(f"error: {exc}", file=sys.stderr)
            code = EXIT_ERROR
            row["error"] = str(exc)
        codes.append(code)
        rows.append(row)
    write_sweep_summary(root / "sweep_summary.csv", rows)
    print(root / "sweep_summary.csv")
    if EXIT_ERROR in codes:
        return EXIT_ERROR
    return EXIT_MAX_STEPS if EXIT_MAX_STEPS in codes else EXIT_CONVERGED


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handlers = {"run": cmd_run, "report": cmd_report, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except (ConfigError, ReportError, CMTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
