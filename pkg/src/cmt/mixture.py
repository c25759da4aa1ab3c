"""Gaussian-mixture approximation family fitted by weighted EM.

Minimizing the importance-weighted forward KL ``KL(q_next || q)`` over the
family is weighted maximum likelihood on the buffer, which EM solves
monotonically. Covariance eigenvalues are floored at ``var_floor`` and
mixture weights at ``weight_floor``; both floors are imposed as the exact
constrained maximizers of the M-step, so monotonicity survives them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .core import (
    DegenerateBufferError,
    MultiplierPair,
    WeightedBuffer,
    as_points,
    log_sum_exp,
    make_rng,
)
from .dual import log_tilt

SCHEMA = "cmt.mixture/1"
_LOG_2PI = np.log(2.0 * np.pi)


class MixtureModel:
    """Finite Gaussian mixture with full covariances.

    Instances are immutable; :func:`weighted_fit` returns a new model.
    """

    def __init__(self, weights, means, covariances):
        weights = np.array(weights, dtype=float).reshape(-1)
        means = np.array(means, dtype=float)
        if means.ndim == 1:
            means = means.reshape(weights.size, -1)
        k, d = means.shape
        covs = np.array(covariances, dtype=float).reshape(k, d, d)
        if weights.size != k:
            raise ValueError(f"{weights.size} weights for {k} components")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must lie on the simplex (sum={weights.sum()!r})")
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        chols = np.empty_like(covs)
        for j in range(k):
            try:
                chols[j] = np.linalg.cholesky(covs[j])
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance {j} is not positive definite") from exc
        for a in (weights, means, covs, chols):
            a.setflags(write=False)
        self.weights = weights
        self.means = means
        self.covariances = covs
        self._chols = chols
        self._log_weights = np.log(np.maximum(weights, np.finfo(float).tiny))
        self._log_dets = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
        # Quadratic forms are evaluated as one matrix product against the
        # features of _quad_features, in coordinates centered on the mixture
        # mean to keep cancellation small.
        inv_chols = np.stack([solve_triangular(c, np.eye(d), lower=True) for c in chols])
        self._prec = np.swapaxes(inv_chols, 1, 2) @ inv_chols
        self._center = weights @ means
        self._coef, self._const = self._feature_coefficients(self._center)

    def _feature_coefficients(self, center):
        """``(coef, const)`` with ``component_log_prob(x) = feats(x - center) @ coef + const``."""
        d = self.dim
        prec = self._prec
        mc = self.means - center
        iu, ju = np.triu_indices(d)
        quad = prec[:, iu, ju] * np.where(iu == ju, 1.0, 2.0)
        lin = -2.0 * np.einsum("kij,kj->ki", prec, mc)
        maha0 = np.einsum("ki,kij,kj->k", mc, prec, mc)
        const = -0.5 * (maha0 + d * _LOG_2PI + self._log_dets) + self._log_weights
        const[self.weights == 0] = -np.inf
        return -0.5 * np.hstack([lin, quad]).T, const

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def component_log_prob(self, x) -> np.ndarray:
        """``(n, K)`` array of ``log w_k + log N(x; mu_k, Sigma_k)``."""
        x = as_points(x, self.dim)
        return _quad_features(x - self._center) @ self._coef + self._const

    def log_prob(self, x) -> np.ndarray:
        return log_sum_exp(self.component_log_prob(x), axis=1)

    def sample(self, n: int, seed: int) -> np.ndarray:
        """Ancestral sampling: component index, then a Gaussian draw."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        rng = make_rng(seed)
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chols[comp], z)

    def to_dict(self) -> dict:
        return {
            "format": SCHEMA,
            "dim": self.dim,
            "n_components": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureModel":
        if d.get("format") != SCHEMA:
            raise ValueError(f"unsupported mixture format {d.get('format')!r}")
        model = cls(d["weights"], d["means"], d["covariances"])
        if model.dim != d["dim"] or model.n_components != d["n_components"]:
            raise ValueError("mixture snapshot header disagrees with its arrays")
        return model

    @classmethod
    def from_json(cls, s: str) -> "MixtureModel":
        return cls.from_dict(json.loads(s))

    def __repr__(self):
        return f"MixtureModel(dim={self.dim}, n_components={self.n_components})"


def gaussian(mean, cov) -> MixtureModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim < 2:
        cov = np.diag(np.broadcast_to(cov, mean.shape)) if cov.ndim == 1 else cov * np.eye(mean.size)
    return MixtureModel([1.0], mean[None, :], cov[None])


def initial_mixture(dim: int, k_comp: int, center, scale, seed: int, jitter: float = 0.1) -> MixtureModel:
    """Broad start: ``k_comp`` copies of ``N(center, diag(scale**2))`` with jittered means.

    Jitter is ``jitter * scale`` per coordinate so EM can break symmetry.
    """
    center = np.broadcast_to(np.asarray(center, dtype=float), (dim,))
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (dim,))
    rng = make_rng(seed, 0xC0FFEE)
    means = center + (jitter * scale) * rng.standard_normal((k_comp, dim))
    if k_comp == 1:
        means = center[None, :].copy()
    covs = np.broadcast_to(np.diag(scale**2), (k_comp, dim, dim))
    return MixtureModel(np.full(k_comp, 1.0 / k_comp), means, covs)


@dataclass(frozen=True)
class FitConfig:
    var_floor: float = 1e-6
    weight_floor: float = 1e-8
    em_tol: float = 1e-7
    em_max_iters: int = 50
    component_floor: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.var_floor <= 0 or self.weight_floor < 0 or self.em_max_iters < 1:
            raise ValueError("invalid fit configuration")


@dataclass
class FitReport:
    em_iterations: int
    weighted_loglik_trace: list = field(default_factory=list)
    effective_weight_count: float = float("nan")
    degenerate_components_reset: int = 0


def importance_weights(buffer: WeightedBuffer, mult: MultiplierPair, log_z: float | None = None) -> np.ndarray:
    """Self-normalized weights of the next intermediate density on the buffer.

    ``log w_n ∝ log_mass_n + (log_p_n - (1 + eta) log_q_n) / (1 + lam + eta)``.
    ``log_z`` only shifts the unnormalized weights and cancels here.
    """
    lw = buffer.log_mass + log_tilt(buffer, mult)
    if log_z is not None:
        lw = lw - log_z
    total = log_sum_exp(lw)
    if total == -np.inf:
        raise DegenerateBufferError("degenerate buffer: all importance weights vanish")
    return np.exp(lw - total)


def weighted_loglik(model: MixtureModel, points, weights) -> float:
    return float(np.dot(weights, model.log_prob(points)))


def _project_weights(mass: np.ndarray, floor: float) -> np.ndarray:
    """argmax sum(mass * log pi) over the simplex with pi >= floor."""
    k = mass.size
    if floor * k >= 1.0:
        return np.full(k, 1.0 / k)
    pi = mass / mass.sum()
    pinned = np.zeros(k, dtype=bool)
    for _ in range(k):
        low = (pi < floor) & ~pinned
        if not low.any():
            break
        pinned |= low
        free_mass = mass[~pinned].sum()
        pi = np.where(pinned, floor, mass * (1.0 - floor * pinned.sum()) / free_mass)
    return pi / pi.sum()


def _floor_covariance(cov: np.ndarray, var_floor: float) -> np.ndarray:
    """Clip eigenvalues at ``var_floor``; works on a single matrix or a stack."""
    vals, vecs = np.linalg.eigh(0.5 * (cov + np.swapaxes(cov, -1, -2)))
    vals = np.maximum(vals, var_floor)
    return (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def _quad_features(x: np.ndarray) -> np.ndarray:
    """Columns ``x_i`` followed by ``x_i x_j`` for ``i <= j``."""
    n, d = x.shape
    out = np.empty((n, d + d * (d + 1) // 2))
    out[:, :d] = x
    # row-major upper triangle, the order of np.triu_indices
    k = d
    for i in range(d):
        np.multiply(x[:, i:i + 1], x[:, i:], out=out[:, k:k + d - i])
        k += d - i
    return out


@dataclass(frozen=True)
class _Design:
    """Buffer points, weights and their quadratic features, built once per fit."""

    x: np.ndarray
    w: np.ndarray
    center: np.ndarray
    feats: np.ndarray
    weighted_feats: np.ndarray

    @classmethod
    def build(cls, x, w):
        center = w @ x
        feats = _quad_features(x - center)
        return cls(x, w, center, feats, feats * w[:, None])


def _e_step(model, design: _Design):
    coef, const = model._feature_coefficients(design.center)
    comp = design.feats @ coef + const
    top = comp.max(axis=1, keepdims=True)
    e = np.exp(comp - top)
    s = e.sum(axis=1, keepdims=True)
    ll = top[:, 0] + np.log(s[:, 0])
    return float(np.dot(design.w, ll)), e / s


def _m_step(model, design: _Design, resp, cfg: FitConfig) -> MixtureModel:
    d = model.dim
    w = design.w
    nk = w @ resp
    moments = resp.T @ design.weighted_feats
    means = model.means.copy()
    covs = model.covariances.copy()
    # a component with no responsibility keeps its parameters: any value
    # maximizes its (zero) share of the objective
    live = np.flatnonzero((nk > 0) & np.isfinite(nk))
    mom = moments[live] / nk[live, None]
    mu = mom[:, :d]
    second = np.empty((live.size, d, d))
    iu, ju = np.triu_indices(d)
    second[:, iu, ju] = mom[:, d:]
    second[:, ju, iu] = mom[:, d:]
    means[live] = mu + design.center
    covs[live] = _floor_covariance(second - mu[:, :, None] * mu[:, None, :], cfg.var_floor)
    weights = _project_weights(np.maximum(nk, 0.0), cfg.weight_floor)
    return MixtureModel(weights, means, covs)


def _reset_components(model, design: _Design, resp, cfg: FitConfig, rng):
    x, w = design.x, design.w
    mass = (resp * w[:, None]).sum(axis=0)
    dead = np.flatnonzero(mass < cfg.component_floor)
    if dead.size == 0 or dead.size == model.n_components:
        return model, 0
    live = np.setdiff1d(np.arange(model.n_components), dead)
    reset_cov = _floor_covariance(2.0 * np.mean(model.covariances[live], axis=0), cfg.var_floor)
    means = model.means.copy()
    covs = model.covariances.copy()
    weights = model.weights.copy()
    picks = rng.choice(x.shape[0], size=dead.size, p=w)
    means[dead] = x[picks]
    covs[dead] = reset_cov
    weights[dead] = 1.0 / model.n_components
    weights = _project_weights(weights, cfg.weight_floor)
    return MixtureModel(weights, means, covs), int(dead.size)


def _run_em(model, design: _Design, cfg: FitConfig):
    loglik, resp = _e_step(model, design)
    trace = [loglik]
    iters = 0
    for iters in range(1, cfg.em_max_iters + 1):
        model = _m_step(model, design, resp, cfg)
        new_loglik, resp = _e_step(model, design)
        trace.append(new_loglik)
        improvement = new_loglik - loglik
        loglik = new_loglik
        if improvement < cfg.em_tol * (1.0 + abs(loglik)):
            break
    return model, trace, iters, resp


def weighted_fit(model: MixtureModel, buffer: WeightedBuffer, weights, fit_cfg: FitConfig = FitConfig()):
    """Refit ``model`` to the buffer under normalized ``weights`` by weighted EM.

    Components whose weighted responsibility mass is below
    ``fit_cfg.component_floor`` at the start are re-seeded at a weighted
    random buffer point with an inflated covariance. The returned model's
    weighted log-likelihood is never below the input model's.

    Returns:
        ``(new_model, FitReport)``
    """
    x = buffer.points
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != x.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for a buffer of {x.shape[0]} rows")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to one")
    if model.dim != buffer.dim:
        raise ValueError("model and buffer dimensions differ")

    rng = make_rng(fit_cfg.seed, buffer.rng_seed, 0xF17)
    design = _Design.build(x, w)
    loglik_in, resp = _e_step(model, design)
    start, n_reset = _reset_components(model, design, resp, fit_cfg, rng)
    fitted, trace, iters, _ = _run_em(start, design, fit_cfg)
    if n_reset and trace[-1] < loglik_in:
        fitted, trace, iters, _ = _run_em(model, design, fit_cfg)
        n_reset = 0
    report = FitReport(
        em_iterations=iters,
        weighted_loglik_trace=trace,
        effective_weight_count=float(1.0 / np.sum(w**2)),
        degenerate_components_reset=n_reset,
    )
    return fitted, report


def sample(model: MixtureModel, n: int, seed: int) -> np.ndarray:
    return model.sample(n, seed)


def log_prob(model: MixtureModel, x) -> np.ndarray:
    return model.log_prob(x)
