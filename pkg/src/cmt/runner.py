"""The annealing loop: draw a buffer, solve the multipliers, refit, repeat.

A run writes into ``config.output.run_dir``:

- ``config.toml``: the resolved configuration,
- ``steps.jsonl``: one record per annealing step,
- ``metrics.json``: final metrics and the full path record,
- ``final_model.json`` and, optionally, ``models/model_XXXX.json`` snapshots.

Telemetry record ``k`` describes the transition from the fitted model
``q̂_{k-1}`` to the intermediate ``q_k``: the multipliers applied, the
resulting exponents ``(beta_k, alpha_k)``, the buffer estimate of ``H(q_k)``
(``entropy``) and of the fitted model's own entropy ``H(q̂_{k-1})``
(``entropy_model``), the step ESS and ``log Z`` of the update.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .core import (
    CMTError,
    MultiplierPair,
    WeightedBuffer,
    _json_float,
    draw_buffer,
    entropy_estimate,
    entropy_standard_error,
    quadrature_buffer,
)
from .dual import DualConvergenceWarning, log_z_estimate, next_entropy, solve_dual, step_kl
from .metrics import RunMetrics, ess_fraction, eubo_estimate, evidence, hist_tv, mode_mass_tv, step_ess
from .metrics import empirical_mode_masses
from .mixture import MixtureModel, importance_weights, initial_mixture, weighted_fit
from .path import PathLedger, update_ledger
from .targets import ReferenceStats, make_target, reference_stats

log = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_MAX_STEPS = 2

_REFERENCE_CACHE: dict[str, ReferenceStats] = {}


class RunAborted(CMTError):
    """A step failed; the model state at that step was saved for inspection."""

    def __init__(self, step: int, state_path, cause: BaseException):
        self.step = step
        self.state_path = state_path
        super().__init__(f"run aborted at step {step}: {cause} (state saved to {state_path})")


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a named purpose within a run."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# purpose keys for derive_seed
_INIT, _BUFFER, _FIT, _EVAL, _REFERENCE = 1, 2, 3, 4, 5


def cached_reference_stats(spec) -> ReferenceStats:
    key = spec.key()
    if key not in _REFERENCE_CACHE:
        _REFERENCE_CACHE[key] = reference_stats(spec)
    return _REFERENCE_CACHE[key]


def initial_model(cfg: RunConfig, target) -> MixtureModel:
    fam = cfg.family
    center = target.center_hint if fam.init_center is None else np.asarray(fam.init_center, dtype=float)
    scale = fam.init_entropy_scale * np.asarray(target.scale_hint, dtype=float)
    return initial_mixture(
        target.dim, fam.k_comp, center, scale, derive_seed(cfg.loop.seed, _INIT), jitter=fam.init_jitter
    )


class _Buffers:
    """Per-step buffers: fresh draws, quadrature, or a reweighted replay."""

    def __init__(self, cfg: RunConfig, target):
        self.cfg = cfg
        self.target = target
        self.nodes = target.quadrature_nodes() if cfg.loop.buffer_kind == "quadrature" else None
        self.prev: WeightedBuffer | None = None
        self.prev_log_w: np.ndarray | None = None

    def draw(self, model: MixtureModel, step: int) -> WeightedBuffer:
        loop = self.cfg.loop
        if self.nodes is not None:
            return quadrature_buffer(model, self.target, *self.nodes)
        if loop.refresh_buffer_every_step or self.prev is None:
            return draw_buffer(model, self.target, loop.buffer_size, derive_seed(loop.seed, _BUFFER, step))
        # replay: the previous points under last step's importance weights
        # stand in for the newly fitted model
        prev = self.prev
        return WeightedBuffer(
            prev.points, model.log_prob(prev.points), prev.log_p, prev.rng_seed, log_mass=self.prev_log_w
        )

    def keep(self, buffer: WeightedBuffer, weights: np.ndarray):
        self.prev = buffer
        with np.errstate(divide="ignore"):
            self.prev_log_w = np.log(weights)


def _schedule_multipliers(cfg: RunConfig, step: int) -> tuple[MultiplierPair, float]:
    """Implied multipliers and target beta for the linear geometric schedule."""
    n = cfg.loop.max_steps
    b0, b1 = step / n, (step + 1) / n
    if step + 1 >= n:
        return MultiplierPair(0.0, 0.0), 1.0
    return MultiplierPair((1.0 - b1) / (b1 - b0), 0.0), b1


def _record(step, mult, ledger_state, buffer, entropy_next, log_z, ess, kl, fit_report, dual, wall_ms, applies, fixed):
    return {
        "step": step,
        "lambda": None if fixed else mult.lam,
        "eta": None if fixed else mult.eta,
        "beta": ledger_state.beta,
        "alpha": ledger_state.alpha,
        "entropy": _json_float(entropy_next),
        "step_ess": _json_float(ess),
        "log_z_hat": _json_float(log_z),
        "em_iters": fit_report.em_iterations,
        "wall_ms": wall_ms,
        "entropy_model": _json_float(entropy_estimate(buffer)),
        "entropy_se": _json_float(entropy_standard_error(buffer)),
        "kl_step": _json_float(kl),
        "dual_rounds": None if dual is None else dual.rounds,
        "dual_converged": None if dual is None else dual.converged,
        "components_reset": fit_report.degenerate_components_reset,
        "terminal": applies,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=False, allow_nan=False)


def run(config: RunConfig, write: bool = True) -> RunMetrics:
    """Execute one annealing run and return its metrics.

    With ``write`` the run directory is (re)populated; otherwise nothing is
    written. The returned metrics carry the path ledger and the final model.
    """
    cfg = config
    target = make_target(cfg.target)
    fixed = cfg.schedule_mode == "fixed_linear"
    dual_cfg = None if fixed else cfg.dual_config()
    tol = cfg.loop.terminal_multiplier_tol
    run_dir = Path(cfg.output.run_dir)
    if write:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
        if cfg.output.emit_model_snapshots:
            (run_dir / "models").mkdir(exist_ok=True)
    steps_fh = open(run_dir / "steps.jsonl", "w", encoding="utf-8") if write else None

    model = initial_model(cfg, target)
    buffers = _Buffers(cfg, target)
    ledger: PathLedger | None = None
    converged = False
    step = 0
    try:
        for step in range(cfg.loop.max_steps):
            t0 = time.perf_counter()
            if write and cfg.output.emit_model_snapshots:
                (run_dir / "models" / f"model_{step:04d}.json").write_text(model.to_json(), encoding="utf-8")
            try:
                buffer = buffers.draw(model, step)
                if ledger is None:
                    ledger = PathLedger.start(entropy_estimate(buffer))
                dual = None
                if fixed:
                    mult, beta = _schedule_multipliers(cfg, step)
                    terminal = beta == 1.0
                else:
                    beta = None
                    with warnings.catch_warnings():
                        warnings.simplefilter("always", DualConvergenceWarning)
                        dual = solve_dual(buffer, dual_cfg)
                    mult = dual.multipliers
                    terminal = mult.lam <= tol and mult.eta <= tol
                    if terminal:
                        mult = MultiplierPair(0.0, 0.0)
                log_z = log_z_estimate(buffer, mult)
                weights = importance_weights(buffer, mult, log_z)
                ess = step_ess(buffer, mult)
                kl = step_kl(buffer, mult)
                h_next = next_entropy(buffer, mult)
                fit_cfg = cfg.family.fit_config(derive_seed(cfg.loop.seed, _FIT, step))
                new_model, fit_report = weighted_fit(model, buffer, weights, fit_cfg)
                ledger = update_ledger(
                    ledger, mult, h_next, log_z, ess, beta=beta,
                    converged=True if dual is None else dual.converged,
                )
            except Exception as exc:
                raise _abort(run_dir if write else None, step, model, exc) from exc
            buffers.keep(buffer, weights)
            wall_ms = round(1000 * (time.perf_counter() - t0), 3) if cfg.output.record_wall_ms else None
            rec = _record(step + 1, mult, ledger.last, buffer, h_next, log_z, ess, kl, fit_report, dual,
                          wall_ms, terminal, fixed)
            if steps_fh is not None:
                steps_fh.write(_dumps(rec) + "\n")
                steps_fh.flush()
            log.info("step %d: lam=%.4g eta=%.4g beta=%.4f ess=%.3f", step + 1, mult.lam, mult.eta, ledger.last.beta, ess)
            model = new_model
            if terminal:
                converged = True
                break
    finally:
        if steps_fh is not None:
            steps_fh.close()

    metrics = final_metrics(cfg, target, model, ledger, dual_cfg)
    metrics.converged = converged
    metrics.exit_code = EXIT_CONVERGED if converged else EXIT_MAX_STEPS
    metrics.initial_model = initial_model(cfg, target)
    if write:
        (run_dir / "final_model.json").write_text(model.to_json(), encoding="utf-8")
        (run_dir / "metrics.json").write_text(json.dumps(metrics.as_dict(), indent=2) + "\n", encoding="utf-8")
    return metrics


def run_fixed_linear(config: RunConfig, write: bool = True) -> RunMetrics:
    """Geometric path with ``beta_i = i / I``, ``I = loop.max_steps``."""
    if config.schedule_mode != "fixed_linear":
        config = replace(config, schedule_mode="fixed_linear")
    return run(config, write)


def _abort(run_dir, step, model, exc) -> RunAborted:
    state_path = None
    if run_dir is not None:
        state_path = run_dir / "failure.json"
        state = {"step": step + 1, "error": f"{type(exc).__name__}: {exc}", "model": model.to_dict()}
        state_path.write_text(json.dumps(state, indent=2) + "\n", encoding="utf-8")
    return RunAborted(step + 1, state_path, exc)


def final_metrics(cfg: RunConfig, target, model: MixtureModel, ledger: PathLedger, dual_cfg=None) -> RunMetrics:
    """Evaluate the final model on a fresh buffer and against reference samples."""
    n = cfg.loop.eval_size or cfg.loop.buffer_size
    seed = cfg.loop.seed
    buf = draw_buffer(model, target, n, derive_seed(seed, _EVAL))
    ev = evidence(buf)
    eubo = eubo_estimate(target.sample_reference(n, derive_seed(seed, _REFERENCE)), model, target)
    ref = cached_reference_stats(cfg.target)
    tv = mode_mass_tv(buf.points, ref)
    htv = hist_tv(buf.points, ref) if ref.hist is not None else float("nan")
    metrics = RunMetrics(
        ess_reverse_frac=ess_fraction(buf.log_p - buf.log_q, clip=True),
        eubo=eubo.value,
        elbo=ev.elbo,
        log_z_hat=ev.log_z_hat,
        mode_mass_tv=tv,
        hist2d_tv=htv,
        per_step=list(ledger.entries),
        eubo_se=eubo.se,
        elbo_se=ev.elbo_se,
        elbo_clipped=ev.elbo_clipped,
        log_z_se=ev.log_z_se,
        true_log_z=float(target.true_log_z),
        n_steps=len(ledger) - 1,
        mode_masses=empirical_mode_masses(buf.points, ref.mode_centers).tolist(),
    )
    metrics.ess_reverse_unclipped = ess_fraction(buf.log_p - buf.log_q, clip=False)
    metrics.entropy_final = entropy_estimate(buf)
    metrics.entropy_final_se = entropy_standard_error(buf)
    metrics.reference_entropy = float(ref.entropy)
    if dual_cfg is not None:
        # a further solve on a fresh buffer should find both constraints slack
        sol = solve_dual(buf, dual_cfg)
        metrics.terminal_lambda = sol.multipliers.lam
        metrics.terminal_eta = sol.multipliers.eta
    metrics.ledger = ledger
    metrics.model = model
    return metrics
