"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line; the lines are repeated in a
summary section at the end of the pytest session. Expensive runs are
cached per session and shared between criteria, and each criterion's
runtime is the sum of the runs it consumes.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from cmt.core import MultiplierPair, quadrature_buffer
from cmt.dual import DualConfig, dual_tr, dual_tr_ent
from cmt.mixture import MixtureModel, gaussian
from cmt.path import closed_form_log_density, iterated_log_density
from cmt.targets import TargetSpec, make_target

from conftest import all_cached_runs

pytestmark = pytest.mark.slow

EPS_TR = 0.3
ESS_FLOOR = 1.0 / (1.0 + 2.0 * EPS_TR) - 0.05

# Settings per target for the ESS-floor sweep; the funnel run is reused for
# the entropy-compliance check and the gmm_grid run is seed 0 of the
# mode-coverage comparison.
ESS_RUNS = {
    "gauss1d": {"target.name": "gauss1d"},
    "gmm_grid": {"target.name": "gmm_grid", "family.k_comp": 25},
    "many_well": {"target.name": "many_well", "target.dim": 5, "family.k_comp": 32},
    "funnel": {"target.name": "funnel", "target.dim": 10, "family.k_comp": 10,
               "dual.eps_ent": 1.0, "loop.max_steps": 60},
}
N_LARGE = 100_000


def _ess_config(name):
    return {**ESS_RUNS[name], "dual.eps_tr": EPS_TR, "loop.buffer_size": N_LARGE, "loop.seed": 0}


def _records(run_dir):
    return [json.loads(line) for line in (run_dir / "steps.jsonl").read_text().splitlines()]


def _gauss_kl(a: MixtureModel, b: MixtureModel) -> float:
    """Closed-form KL(a || b) between one-component 1D models."""
    m1, v1 = a.means[0, 0], a.covariances[0, 0, 0]
    m0, v0 = b.means[0, 0], b.covariances[0, 0, 0]
    return 0.5 * (np.log(v0 / v1) + (v1 + (m1 - m0) ** 2) / v0 - 1.0)


def test_ess_floor(runner, verdict):
    lines, ok, seconds = [], True, 0.0
    for name in ESS_RUNS:
        metrics, secs, run_dir = runner(**_ess_config(name))
        seconds += secs
        ess = [r["step_ess"] for r in _records(run_dir)]
        worst = min(ess)
        below = sum(e < ESS_FLOOR for e in ess)
        ok &= below == 0
        lines.append(f"{name} min {worst:.3f} ({below}/{len(ess)} below)")
    ok &= seconds <= 300
    verdict("1 ESS floor", ok, f"floor {ESS_FLOOR:.3f}; " + ", ".join(lines) + f"; {seconds:.0f}s")
    assert ok


def test_trust_region_tightness(tmp_path, verdict):
    t0 = time.perf_counter()
    from cmt.config import from_flat
    from cmt.runner import run

    worst, n_active = 0.0, 0
    for eps in (0.1, 0.3, 1.0):
        run_dir = tmp_path / f"eps_{eps}"
        metrics = run(from_flat({
            "target.name": "gauss1d", "family.init_center": [6.0], "dual.eps_tr": eps,
            "loop.buffer_kind": "quadrature", "output.run_dir": str(run_dir),
            "output.emit_model_snapshots": True,
        }))
        assert metrics.converged
        models = [MixtureModel.from_json(p.read_text()) for p in sorted((run_dir / "models").glob("model_*.json"))]
        models.append(metrics.model)
        for k, entry in enumerate(metrics.ledger.entries[1:]):
            if entry.multipliers.lam == 0.0:
                continue
            n_active += 1
            worst = max(worst, abs(_gauss_kl(models[k + 1], models[k]) / eps - 1.0))
    seconds = time.perf_counter() - t0
    ok = worst <= 0.02 and n_active >= 3 and seconds <= 60
    verdict("2 trust-region tightness", ok, f"max relative KL error {worst:.2e} over {n_active} active steps; {seconds:.1f}s")
    assert ok


def _quick_runs(runner):
    """Small runs covering every schedule mode, used by the property criteria."""
    base = {"loop.buffer_size": 4000, "loop.seed": 3}
    out = {}
    for mode in ("combined", "tr_only", "ent_only", "fixed_linear"):
        out[("gauss1d", mode)] = runner(**base, **{"target.name": "gauss1d", "family.init_center": [4.0],
                                                   "schedule_mode": mode, "loop.max_steps": 30})
        out[("gmm_grid", mode)] = runner(**base, **{"target.name": "gmm_grid", "family.k_comp": 9,
                                                    "schedule_mode": mode, "loop.max_steps": 30})
    return out


def test_path_equivalence(runner, verdict):
    t0 = time.perf_counter()
    _quick_runs(runner)
    worst, n_runs, problems = 0.0, 0, []
    for metrics, _, run_dir in all_cached_runs():
        saved = json.loads((run_dir / "metrics.json").read_text())
        ledger, q0 = metrics.ledger, metrics.initial_model
        target = make_target(_target_spec(run_dir))
        x = metrics.model.sample(100, 99)
        for i in range(len(ledger)):
            a = closed_form_log_density(ledger, q0, target, i, x)
            b = iterated_log_density(ledger, q0, target, i, x)
            worst = max(worst, float(np.max(np.abs((a - a.mean()) - (b - b.mean())))))
        betas, alphas = ledger.betas, ledger.alphas
        if betas[0] != 0.0 or alphas[0] != 0.0:
            problems.append(f"{run_dir.name}: nonzero start")
        if np.any(np.diff(betas) < 0):
            problems.append(f"{run_dir.name}: beta decreases")
        if saved["converged"] and (abs(betas[-1] - 1) > 1e-6 or abs(alphas[-1] - 1) > 1e-6):
            problems.append(f"{run_dir.name}: terminal exponents {betas[-1]}, {alphas[-1]}")
        n_runs += 1
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-9 and not problems
    verdict("3 path equivalence", ok, f"{n_runs} runs, max centred deviation {worst:.2e}, "
            f"{len(problems)} exponent violations; {seconds:.1f}s (including runs)")
    assert ok, problems


def _target_spec(run_dir):
    from cmt.config import load_config

    return load_config(run_dir / "config.toml").target


def test_specialization(runner, verdict):
    runs = _quick_runs(runner)
    bad = []
    for (name, mode), (metrics, _, _) in runs.items():
        alphas, betas = metrics.ledger.alphas[1:], metrics.ledger.betas[1:]
        if mode == "tr_only" and not np.all(alphas == 1.0):
            bad.append(f"{name} tr_only alphas {alphas}")
        if mode == "ent_only" and not np.all(betas == 1.0):
            bad.append(f"{name} ent_only betas {betas}")

    target = make_target(TargetSpec("gmm_grid"))
    nodes, log_mass = target.quadrature_nodes(0.1)
    buf = quadrature_buffer(gaussian([0.5, -0.3], np.diag([9.0, 6.0])), target, nodes, log_mass)
    cfg = DualConfig(eps_tr=0.3, eps_ent=0.5)
    worst = 0.0
    for lam in np.concatenate([[0.0], np.logspace(-4, 4, 19)]):
        a = dual_tr_ent(buf, MultiplierPair(lam, 0.0), cfg)
        b = dual_tr(buf, lam, cfg)
        worst = max(worst, abs(a - b) / max(1.0, abs(b)))
    ok = not bad and worst <= 4 * np.finfo(float).eps
    verdict("4 specialization", ok, f"{len(runs)} runs checked, {len(bad)} exponent violations, "
            f"max dual mismatch {worst:.1e}")
    assert ok, bad


def _second_difference_violation(x, g):
    """Largest amount by which g rises above its chord on consecutive triples."""
    x0, x1, x2 = x[:-2], x[1:-1], x[2:]
    t = (x1 - x0) / (x2 - x0)
    chord = (1 - t) * g[..., :-2] + t * g[..., 2:]
    return float(np.max(chord - g[..., 1:-1]))


def test_dual_concavity(verdict):
    t0 = time.perf_counter()
    grid = np.logspace(-3, 3, 30)
    cfg = DualConfig(eps_tr=0.3, eps_ent=0.5)
    cases = []
    t1 = make_target(TargetSpec("gauss1d"))
    cases.append((t1, gaussian([2.0], [[4.0]])))
    t2 = make_target(TargetSpec("gmm_grid"))
    cases.append((t2, gaussian([0.5, -0.3], np.diag([9.0, 6.0]))))
    cases.append((t2, MixtureModel([0.5, 0.5], [[-4.0, 0.0], [3.0, 3.0]], [np.eye(2) * 2.0, np.eye(2) * 3.0])))
    worst = -np.inf
    for target, model in cases:
        nodes, log_mass = target.quadrature_nodes(0.05 if target.dim == 2 else None)
        buf = quadrature_buffer(model, target, nodes, log_mass)
        g = np.array([[dual_tr_ent(buf, MultiplierPair(lam, eta), cfg) for eta in grid] for lam in grid])
        worst = max(worst, _second_difference_violation(grid, g), _second_difference_violation(grid, g.T))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-9 and seconds <= 120
    verdict("5 dual concavity", ok, f"{len(cases)} buffers on a 30x30 grid, max chord excess {worst:.2e}; {seconds:.1f}s")
    assert ok


SEEDS = range(5)


def _coverage_config(mode, seed):
    flat = {"target.name": "gmm_grid", "family.k_comp": 25, "loop.buffer_size": N_LARGE,
            "loop.seed": seed, "schedule_mode": mode}
    if mode == "fixed_linear":
        flat["loop.max_steps"] = 10
    else:
        flat["dual.eps_tr"] = EPS_TR
    return flat


def test_mode_coverage(runner, verdict):
    tv = {mode: [] for mode in ("combined", "tr_only", "fixed_linear")}
    populated, seconds = True, 0.0
    for mode in tv:
        for seed in SEEDS:
            metrics, secs, _ = runner(**_coverage_config(mode, seed))
            seconds += secs
            tv[mode].append(metrics.mode_mass_tv)
            if mode == "combined":
                populated &= min(metrics.mode_masses) > 0.0 and len(metrics.mode_masses) == 9
    comb = np.array(tv["combined"])
    wins = {m: int(np.sum(np.array(tv[m]) > comb)) for m in ("tr_only", "fixed_linear")}
    ok = comb.max() <= 0.03 and populated and min(wins.values()) >= 4 and seconds <= 600
    verdict("6 mode coverage", ok,
            f"combined TV max {comb.max():.4f}, all basins populated={populated}; "
            f"baseline worse on {wins['tr_only']}/5 (tr_only), {wins['fixed_linear']}/5 (fixed_linear); {seconds:.0f}s")
    assert ok


def test_evidence_recovery(runner, verdict):
    metrics, seconds, _ = runner(**{"target.name": "gauss1d", "target.log_offset": 7.0,
                                    "loop.buffer_size": 1_000_000, "loop.seed": 0})
    target = make_target(TargetSpec("gauss1d", params={"log_offset": 7.0}))
    z_err = abs(metrics.log_z_hat - target.true_log_z)
    gap = metrics.eubo - metrics.elbo
    ok = z_err <= 3 * metrics.log_z_se and gap < 0.05 and seconds <= 120
    verdict("7 evidence recovery", ok, f"log Z {metrics.log_z_hat:.6f} vs {target.true_log_z:.6f} "
            f"(|err| {z_err:.1e}, 3 SE {3 * metrics.log_z_se:.1e}); EUBO-ELBO {gap:.2e}; {seconds:.1f}s")
    assert ok


def test_entropy_compliance(runner, verdict):
    metrics, seconds, run_dir = runner(**_ess_config("funnel"))
    recs = _records(run_dir)
    eps = ESS_RUNS["funnel"]["dual.eps_ent"]
    tol = 1e-6
    # entropy of the fitted model entering each step, then the final model
    h = np.array([r["entropy_model"] for r in recs] + [metrics.entropy_final])
    se = np.array([r["entropy_se"] for r in recs] + [metrics.entropy_final_se])
    active = [k for k, r in enumerate(recs) if r["eta"] > tol]
    excess = []
    for k in active:
        # constraint on the intermediate, and on the refitted model that follows it
        excess.append(h[k] - recs[k]["entropy"] - (eps + 3 * se[k]))
        excess.append(h[k] - h[k + 1] - (eps + 3 * np.hypot(se[k], se[k + 1])))
    worst = max(excess) if excess else -np.inf
    steps = np.array(active) + 1
    trace = h[steps]
    fit = stats.linregress(steps, trace)
    resid = np.abs(trace - (fit.intercept + fit.slope * steps)).max()
    rel = resid / np.ptp(trace) if len(trace) > 2 else np.inf
    ok = len(active) >= 3 and worst <= 0 and rel <= 0.10 and seconds <= 300
    verdict("8 entropy compliance", ok, f"{len(active)} active steps, max excess over eps_ent + 3 SE {worst:.3f}, "
            f"linear-fit residual {100 * rel:.1f}% of range; {seconds:.0f}s")
    assert ok


def test_determinism(tmp_path, verdict):
    from cmt.config import from_flat
    from cmt.runner import run

    t0 = time.perf_counter()
    same = []
    for name, extra in (("gauss1d", {"family.init_center": [3.0]}), ("gmm_grid", {"family.k_comp": 9})):
        blobs = []
        for rep in range(2):
            run_dir = tmp_path / f"{name}_{rep}"
            run(from_flat({"target.name": name, "loop.buffer_size": 20_000, "loop.seed": 11,
                           "output.run_dir": str(run_dir), **extra}))
            blobs.append(tuple((run_dir / f).read_bytes() for f in ("steps.jsonl", "final_model.json", "metrics.json")))
        same.append(blobs[0] == blobs[1])
    seconds = time.perf_counter() - t0
    ok = all(same) and seconds <= 120
    verdict("9 determinism", ok, f"byte-identical telemetry on {sum(same)}/2 targets; {seconds:.1f}s")
    assert ok
