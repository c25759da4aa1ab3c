"""Summaries of a finished run directory: CSV table, metrics JSON and figures.

Reports are pure functions of the files a run left behind, so re-running
:func:`report` reproduces its outputs byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ConfigError, parse_config_text  # noqa: E402

STEP_KEYS = ("step", "lambda", "eta", "beta", "alpha", "entropy", "step_ess", "log_z_hat", "em_iters", "wall_ms")
CSV_COLUMNS = ("i", "lambda", "eta", "beta", "alpha", "entropy", "step_ess", "log_z_hat")
FIGURES = ("path.png", "multipliers.png", "entropy.png", "step_ess.png")

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 3.5,
    "savefig.dpi": 120,
}


class ReportError(ValueError):
    """The run directory is missing files or holds malformed telemetry."""

    def __init__(self, run_dir, defects):
        self.defects = list(defects)
        lines = "\n".join(f"  - {d}" for d in self.defects)
        super().__init__(f"cannot report on {run_dir}:\n{lines}")


def load_run(run_dir):
    """Read and validate ``steps.jsonl``, ``metrics.json`` and ``config.toml``.

    Returns ``(records, metrics, config_flat)``; raises :class:`ReportError`
    listing every defect found.
    """
    run_dir = Path(run_dir)
    defects = []
    if not run_dir.is_dir():
        raise ReportError(run_dir, ["directory does not exist"])
    for name in ("steps.jsonl", "metrics.json", "config.toml"):
        if not (run_dir / name).is_file():
            defects.append(f"missing {name}")
    if defects:
        raise ReportError(run_dir, defects)

    records = []
    for lineno, line in enumerate((run_dir / "steps.jsonl").read_text(encoding="utf-8").splitlines(), 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            defects.append(f"steps.jsonl line {lineno}: not JSON ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            defects.append(f"steps.jsonl line {lineno}: not an object")
            continue
        missing = [k for k in STEP_KEYS if k not in rec]
        if missing:
            defects.append(f"steps.jsonl line {lineno}: missing keys {missing}")
        elif rec["step"] != len(records) + 1:
            defects.append(f"steps.jsonl line {lineno}: step {rec['step']!r}, expected {len(records) + 1}")
        records.append(rec)
    if not records and not defects:
        defects.append("steps.jsonl has no records")

    try:
        metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        defects.append(f"metrics.json: not JSON ({exc.msg})")
        metrics = None
    if metrics is not None:
        per_step = metrics.get("per_step") if isinstance(metrics, dict) else None
        if not isinstance(per_step, list):
            defects.append("metrics.json: no per_step list")
        elif len(per_step) != len(records) + 1:
            defects.append(f"metrics.json: {len(per_step)} path entries for {len(records)} steps")

    try:
        config = parse_config_text((run_dir / "config.toml").read_text(encoding="utf-8"))
    except ConfigError as exc:
        defects.append(f"config.toml: {exc}")
        config = None
    if defects:
        raise ReportError(run_dir, defects)
    return records, metrics, config


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_rows(records, metrics):
    """One row per path entry ``0..n``; multipliers follow the telemetry."""
    rows = []
    for k, e in enumerate(metrics["per_step"]):
        lam = eta = None
        if k > 0:
            lam, eta = records[k - 1]["lambda"], records[k - 1]["eta"]
        rows.append((k, lam, eta, e["beta"], e["alpha"], e["entropy"], e["step_ess"], e["log_z_hat"]))
    return rows


def _write_if_changed(path: Path, data: bytes):
    if path.is_file() and path.read_bytes() == data:
        return
    path.write_bytes(data)


def _floats(values):
    return [math.nan if v is None else float(v) for v in values]


def _save(fig, path: Path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    _write_if_changed(path, buf.getvalue())


def render_figures(run_dir, records, metrics, config) -> list[Path]:
    run_dir = Path(run_dir)
    steps = [0] + [r["step"] for r in records]
    path = metrics["per_step"]
    mode = config.get("schedule_mode", "combined")
    eps_tr = float(config.get("dual.eps_tr", 0.3))
    out = []
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, [e["beta"] for e in path], "o-", label=r"$\beta_i$")
        ax.plot(steps, [e["alpha"] for e in path], "s-", label=r"$\alpha_i$")
        ax.set_xlabel("annealing step $i$")
        ax.set_ylim(-0.03, 1.03)
        ax.set_title(f"path exponents ({mode})")
        ax.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, run_dir / "path.png")
        out.append(run_dir / "path.png")

        fig, ax = plt.subplots()
        s1 = steps[1:]
        for key, label, marker in (("lambda", r"$\lambda_i$", "o-"), ("eta", r"$\eta_i$", "s-")):
            vals = _floats(r[key] for r in records)
            # zero multipliers (slack constraints) have no place on a log axis
            ax.plot(s1, [v if v > 0 else math.nan for v in vals], marker, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("annealing step $i$")
        ax.set_title("multipliers (zero values omitted)")
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, run_dir / "multipliers.png")
        out.append(run_dir / "multipliers.png")

        fig, ax = plt.subplots()
        model_h = _floats([r.get("entropy_model") for r in records] + [metrics.get("entropy_final")])
        ax.plot(steps, model_h, "o-", label=r"fitted model $\hat H(\hat q_i)$")
        ax.plot(steps, _floats(e["entropy"] for e in path), "s--", label=r"intermediate $\hat H(q_i)$")
        ref = metrics.get("reference_entropy")
        if ref is not None:
            ax.axhline(ref, color="k", lw=0.8, ls=":", label="target")
        ax.set_xlabel("annealing step $i$")
        ax.set_ylabel("entropy [nats]")
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, run_dir / "entropy.png")
        out.append(run_dir / "entropy.png")

        fig, ax = plt.subplots()
        ax.plot(s1, _floats(r["step_ess"] for r in records), "o-", label="step ESS")
        if mode in ("combined", "tr_only"):
            ax.axhline(1.0 / (1.0 + 2.0 * eps_tr), color="k", lw=0.8, ls="--",
                       label=rf"$1/(1+2\epsilon_{{tr}})$, $\epsilon_{{tr}}={eps_tr:g}$")
        ax.set_ylim(0.0, 1.03)
        ax.set_xlabel("annealing step $i$")
        ax.set_ylabel("ESS fraction")
        ax.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, run_dir / "step_ess.png")
        out.append(run_dir / "step_ess.png")
    return out


def report(run_dir) -> dict:
    """Write ``summary.csv``, ``final_metrics.json`` and the figures.

    Returns a mapping from output kind to path.
    """
    run_dir = Path(run_dir)
    records, metrics, config = load_run(run_dir)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in summary_rows(records, metrics):
        writer.writerow([_cell(v) for v in row])
    csv_path = run_dir / "summary.csv"
    _write_if_changed(csv_path, buf.getvalue().encode("utf-8"))

    final = {k: v for k, v in metrics.items() if k != "per_step"}
    json_path = run_dir / "final_metrics.json"
    _write_if_changed(json_path, (json.dumps(final, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    figures = render_figures(run_dir, records, metrics, config)
    return {"summary": csv_path, "final_metrics": json_path, "figures": figures}


def write_sweep_summary(path, rows: list[dict]):
    """One CSV row per sweep point: its overrides followed by final metrics."""
    if not rows:
        raise ValueError("empty sweep")
    columns = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_cell(r.get(k)) for k in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
