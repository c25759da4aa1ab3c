"""Evaluation metrics: ESS, evidence bounds and distribution distances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import WeightedBuffer, log_sum_exp
from .targets import ReferenceStats, nearest_mode

CLIP_FRACTION = 1e-4


def _n_clipped(n: int) -> int:
    return max(1, int(n * CLIP_FRACTION))


def clip_top(values, k: int) -> np.ndarray:
    """Set the ``k`` largest entries to the smallest value among them."""
    v = np.array(values, dtype=float)
    if k <= 0 or v.size <= 1:
        return v
    k = min(k, v.size)
    idx = np.argpartition(v, v.size - k)[v.size - k:]
    v[idx] = v[idx].min()
    return v


def ess_fraction(log_weights, clip: bool = False, log_mass=None) -> float:
    """Normalized effective sample size ``(sum w)^2 / (N sum w^2)``.

    With ``clip`` the top ``max(1, N / 10^4)`` weights are first set to the
    smallest value among them. ``log_mass`` generalizes to rows of unequal
    base mass (quadrature buffers), where the result is
    ``1 / (1 + chi^2)`` between the weighted and base measures.
    """
    lw = np.asarray(log_weights, dtype=float).reshape(-1)
    if lw.size == 0:
        raise ValueError("ess_fraction of an empty weight vector")
    if np.all(lw == -np.inf):
        raise ValueError("all log-weights are -inf")
    if clip:
        lw = clip_top(lw, _n_clipped(lw.size))
    if log_mass is None:
        out = np.exp(2 * log_sum_exp(lw) - log_sum_exp(2 * lw) - np.log(lw.size))
    else:
        lm = np.asarray(log_mass, dtype=float).reshape(-1)
        lm = lm - log_sum_exp(lm)
        lw = lw + lm
        lw = lw - log_sum_exp(lw)
        out = np.exp(-log_sum_exp(2 * lw - lm))
    return float(min(out, 1.0))


def step_ess(buffer: WeightedBuffer, mult) -> float:
    """Unclipped ESS between the buffer's model and the next intermediate."""
    from .dual import log_tilt

    lw = log_tilt(buffer, mult)
    return ess_fraction(lw, clip=False, log_mass=None if buffer.is_uniform else buffer.log_mass)


@dataclass(frozen=True)
class EUBO:
    value: float
    se: float
    offending: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


def eubo_estimate(reference_points, model, target) -> EUBO:
    """Monte Carlo ``E_p[log p~ - log q]`` over reference samples from ``p``.

    Reference points where the model density vanishes make the bound
    ``+inf``; their indices are returned in ``offending``.
    """
    x = np.asarray(reference_points, dtype=float)
    log_q = np.asarray(model.log_prob(x), dtype=float)
    log_p = np.asarray(target.log_prob(x), dtype=float)
    bad = np.flatnonzero(~np.isfinite(log_q))
    if bad.size:
        return EUBO(float("inf"), float("nan"), bad)
    r = log_p - log_q
    return EUBO(float(r.mean()), float(r.std(ddof=1) / np.sqrt(r.size)) if r.size > 1 else 0.0)


def elbo_and_logz(buffer: WeightedBuffer) -> tuple[float, float]:
    """``(mean(log p - log q), log mean exp(log p - log q))`` over the buffer."""
    lw = buffer.log_p - buffer.log_q
    finite = lw[np.isfinite(lw)]
    elbo = float(np.mean(lw)) if finite.size == lw.size else float("-inf")
    log_z_hat = log_sum_exp(lw) - np.log(lw.size)
    return elbo, float(log_z_hat)


@dataclass(frozen=True)
class Evidence:
    elbo: float
    elbo_se: float
    elbo_clipped: float
    log_z_hat: float
    log_z_se: float


def evidence(buffer: WeightedBuffer) -> Evidence:
    """ELBO, clipped ELBO and importance-sampling ``log Z`` with standard errors.

    The clipped ELBO raises the lowest ``max(1, N / 10^4)`` log-weights to the
    largest value among them.
    """
    lw = buffer.log_p - buffer.log_q
    n = lw.size
    elbo, log_z_hat = elbo_and_logz(buffer)
    elbo_se = float(np.std(lw, ddof=1) / np.sqrt(n)) if n > 1 and np.isfinite(elbo) else float("nan")
    low = -clip_top(-lw, _n_clipped(n))
    elbo_clipped = float(np.mean(low)) if np.all(np.isfinite(low)) else float("-inf")
    w = np.exp(lw - log_z_hat)
    log_z_se = float(np.std(w, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return Evidence(elbo, elbo_se, elbo_clipped, log_z_hat, log_z_se)


def empirical_mode_masses(samples, centers) -> np.ndarray:
    idx = nearest_mode(np.asarray(samples, dtype=float), centers)
    return np.bincount(idx, minlength=len(centers)) / len(idx)


def mode_mass_tv(model_samples, ref: ReferenceStats) -> float:
    """Half L1 distance between empirical and reference basin masses."""
    emp = empirical_mode_masses(model_samples, ref.mode_centers)
    return float(0.5 * np.abs(emp - ref.mode_masses).sum())


def hist_tv(model_samples, ref: ReferenceStats) -> float:
    """Half L1 distance between histograms; mass outside the grid is its own cell."""
    if ref.hist is None:
        return float("nan")
    x = np.asarray(model_samples, dtype=float)
    h, _ = np.histogramdd(x, bins=ref.hist_edges)
    h = h / x.shape[0]
    out_emp = 1.0 - h.sum()
    out_ref = 1.0 - ref.hist.sum()
    return float(0.5 * (np.abs(h - ref.hist).sum() + abs(out_emp - out_ref)))


@dataclass
class RunMetrics:
    ess_reverse_frac: float
    eubo: float
    elbo: float
    log_z_hat: float
    mode_mass_tv: float
    hist2d_tv: float
    per_step: list
    eubo_se: float = float("nan")
    elbo_se: float = float("nan")
    elbo_clipped: float = float("nan")
    log_z_se: float = float("nan")
    true_log_z: float | None = None
    n_steps: int = 0
    converged: bool = False
    mode_masses: list | None = None
    ess_reverse_unclipped: float = float("nan")
    entropy_final: float = float("nan")
    entropy_final_se: float = float("nan")
    reference_entropy: float = float("nan")
    terminal_lambda: float | None = None
    terminal_eta: float | None = None
    exit_code: int | None = None
    # in-memory only
    ledger: object = field(default=None, repr=False)
    model: object = field(default=None, repr=False)
    initial_model: object = field(default=None, repr=False)

    _IN_MEMORY = ("per_step", "ledger", "model", "initial_model")

    def as_dict(self) -> dict:
        def clean(v):
            if isinstance(v, (float, np.floating)):
                v = float(v)
                if not np.isfinite(v):
                    return None if np.isnan(v) else ("inf" if v > 0 else "-inf")
            return v

        out = {k: clean(v) for k, v in self.__dict__.items() if k not in self._IN_MEMORY}
        out["per_step"] = [s.as_record() for s in self.per_step]
        return out
