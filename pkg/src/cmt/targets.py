"""Analytic benchmark targets with ground truth from quadrature.

All targets return an unnormalized log-density carrying a known additive
``log_offset``, so ``log Z`` is never trivially zero.

    gauss1d    log_offset + log N(x; mu, sigma^2)                      (dim 1)
    gmm_grid   log_offset + log mean_k N(x; c_k, sigma^2 I),
               c_k on a centred grid with ``grid_size`` points per axis
    many_well  log_offset + sum_k [-(x_k^2 - a)^2 / b - kappa x_k^2 / 2]
    funnel     log_offset + log N(x_1; 0, scale^2) + log N(x_2..d; 0, e^{x_1} I)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
from scipy import integrate

from .core import as_points, log_sum_exp, make_rng

_LOG_2PI = np.log(2.0 * np.pi)

DEFAULT_PARAMS = {
    "gauss1d": {"mu": 0.0, "sigma": 1.0, "log_offset": 2.0},
    "gmm_grid": {"grid_size": 3, "spacing": 4.0, "sigma": 0.3, "log_offset": 2.0},
    "many_well": {"a": 2.0, "b": 4.0, "kappa": 0.1, "log_offset": 2.0},
    "funnel": {"scale": 3.0, "log_offset": 2.0},
}
DEFAULT_DIMS = {"gauss1d": 1, "gmm_grid": 2, "many_well": 2, "funnel": 10}


@dataclass(frozen=True)
class TargetSpec:
    name: str
    dim: int | None = None
    params: dict = field(default_factory=dict)
    true_log_z: float | None = None

    def resolved(self) -> "TargetSpec":
        if self.name not in DEFAULT_PARAMS:
            raise ValueError(f"unknown target {self.name!r}; choose from {sorted(DEFAULT_PARAMS)}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.name])
        if unknown:
            raise ValueError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        params = {**DEFAULT_PARAMS[self.name], **self.params}
        dim = DEFAULT_DIMS[self.name] if self.dim is None else int(self.dim)
        return TargetSpec(self.name, dim, params, self.true_log_z)

    def key(self) -> str:
        """Stable hash used to key cached reference statistics."""
        r = self.resolved()
        blob = json.dumps({"name": r.name, "dim": r.dim, "params": r.params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class Target:
    """Base class: subclasses define ``_log_kernel`` and ground-truth hooks."""

    name = "target"

    def __init__(self, dim: int, log_offset: float):
        self.dim = int(dim)
        self.log_offset = float(log_offset)

    def log_prob(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        return self._log_kernel(x) + self.log_offset

    def _log_kernel(self, x):
        raise NotImplementedError

    @property
    def true_log_z(self) -> float:
        raise NotImplementedError

    @property
    def mode_centers(self) -> np.ndarray:
        raise NotImplementedError

    def sample_reference(self, n: int, seed: int) -> np.ndarray:
        raise NotImplementedError

    def quadrature_nodes(self, h: float | None = None):
        """Tensor trapezoid nodes on the bounding box: ``(nodes, log_node_mass)``."""
        if self.dim > 2:
            raise ValueError("grid quadrature is only provided for dim <= 2")
        lo, hi = self.box
        h = self.default_step if h is None else h
        axes = []
        for a, b in zip(lo, hi):
            m = int(np.ceil((b - a) / h)) + 1
            g = np.linspace(a, b, m)
            wt = np.full(m, g[1] - g[0])
            wt[[0, -1]] *= 0.5
            axes.append((g, wt))
        grids = np.meshgrid(*[g for g, _ in axes], indexing="ij")
        wts = np.meshgrid(*[w for _, w in axes], indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        log_mass = np.sum([np.log(w.ravel()) for w in wts], axis=0)
        return nodes, log_mass

    @property
    def box(self):
        raise NotImplementedError

    default_step = 0.02

    # starting-point hints for the initial model
    @property
    def center_hint(self) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def scale_hint(self) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class Gauss1D(Target):
    name = "gauss1d"

    def __init__(self, mu=0.0, sigma=1.0, log_offset=2.0, dim=1):
        if dim != 1:
            raise ValueError("gauss1d is one-dimensional")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        super().__init__(1, log_offset)
        self.mu, self.sigma = float(mu), float(sigma)

    def _log_kernel(self, x):
        z = (x[:, 0] - self.mu) / self.sigma
        return -0.5 * z**2 - 0.5 * _LOG_2PI - np.log(self.sigma)

    @property
    def true_log_z(self):
        return self.log_offset

    @property
    def entropy(self):
        return 0.5 * np.log(2 * np.pi * np.e * self.sigma**2)

    @property
    def mode_centers(self):
        return np.array([[self.mu]])

    def sample_reference(self, n, seed):
        return self.mu + self.sigma * make_rng(seed, 0x7EF).standard_normal((n, 1))

    @property
    def box(self):
        return [self.mu - 14 * self.sigma], [self.mu + 14 * self.sigma]

    @property
    def default_step(self):
        return self.sigma / 50

    @property
    def center_hint(self):
        return np.array([self.mu])

    @property
    def scale_hint(self):
        return np.array([self.sigma])


class GMMGrid(Target):
    name = "gmm_grid"

    def __init__(self, grid_size=3, spacing=4.0, sigma=0.3, log_offset=2.0, dim=2):
        if grid_size < 1 or sigma <= 0:
            raise ValueError("grid_size must be >= 1 and sigma > 0")
        super().__init__(dim, log_offset)
        self.grid_size, self.spacing, self.sigma = int(grid_size), float(spacing), float(sigma)
        ticks = (np.arange(self.grid_size) - (self.grid_size - 1) / 2.0) * self.spacing
        self.centers = np.array(list(product(ticks, repeat=self.dim)), dtype=float)

    def _log_kernel(self, x):
        d2 = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=-1)
        comp = -0.5 * d2 / self.sigma**2 - self.dim * (0.5 * _LOG_2PI + np.log(self.sigma))
        return log_sum_exp(comp, axis=1) - np.log(len(self.centers))

    @property
    def true_log_z(self):
        return self.log_offset

    @property
    def mode_centers(self):
        return self.centers

    def sample_reference(self, n, seed):
        rng = make_rng(seed, 0x7EF)
        k = rng.integers(len(self.centers), size=n)
        return self.centers[k] + self.sigma * rng.standard_normal((n, self.dim))

    @property
    def box(self):
        half = (self.grid_size - 1) / 2.0 * self.spacing + 12 * self.sigma
        return [-half] * self.dim, [half] * self.dim

    @property
    def default_step(self):
        return self.sigma / 8

    @property
    def scale_hint(self):
        var = np.mean(self.centers[:, 0] ** 2) + self.sigma**2
        return np.full(self.dim, np.sqrt(var))


class ManyWell(Target):
    name = "many_well"

    def __init__(self, a=2.0, b=4.0, kappa=0.1, log_offset=2.0, dim=2):
        if b <= 0 or kappa < 0:
            raise ValueError("b must be positive and kappa non-negative")
        super().__init__(dim, log_offset)
        self.a, self.b, self.kappa = float(a), float(b), float(kappa)

    def _potential(self, x):
        return (x**2 - self.a) ** 2 / self.b + 0.5 * self.kappa * x**2

    def _log_kernel(self, x):
        return -np.sum(self._potential(x), axis=1)

    @cached_property
    def _half_width(self):
        v_min = min(self._potential(np.linspace(0, 10, 10001)))
        x = 0.5
        while self._potential(x) - v_min < 60.0:
            x += 0.5
        return x

    @cached_property
    def _log_z1(self):
        # one-dimensional factor, by adaptive quadrature over the real line
        val, _ = integrate.quad(lambda t: np.exp(-self._potential(t)), -np.inf, np.inf, epsabs=0, epsrel=1e-13, limit=200)
        return float(np.log(val))

    @property
    def true_log_z(self):
        return self.log_offset + self.dim * self._log_z1

    @cached_property
    def _grid1d(self):
        L = self._half_width
        g = np.linspace(-L, L, 40001)
        dens = np.exp(-self._potential(g) - self._log_z1)
        return g, dens

    @property
    def entropy(self):
        g, dens = self._grid1d
        h1 = -integrate.trapezoid(dens * np.log(np.maximum(dens, 1e-300)), g)
        return self.dim * float(h1)

    @property
    def mode_centers(self):
        m = np.sqrt(max(self.a - self.kappa * self.b / 4.0, 0.0))
        if m == 0:
            return np.zeros((1, self.dim))
        return np.array(list(product([-m, m], repeat=self.dim)))

    def sample_reference(self, n, seed):
        g, dens = self._grid1d
        cdf = integrate.cumulative_trapezoid(dens, g, initial=0.0)
        cdf /= cdf[-1]
        u = make_rng(seed, 0x7EF).random((n, self.dim))
        return np.interp(u, cdf, g)

    @property
    def box(self):
        L = self._half_width
        return [-L] * self.dim, [L] * self.dim

    @property
    def default_step(self):
        return 0.02

    @property
    def scale_hint(self):
        g, dens = self._grid1d
        return np.full(self.dim, np.sqrt(integrate.trapezoid(g**2 * dens, g)))


class Funnel(Target):
    name = "funnel"

    def __init__(self, scale=3.0, log_offset=2.0, dim=10):
        if dim < 2:
            raise ValueError("funnel needs dim >= 2")
        super().__init__(dim, log_offset)
        self.scale = float(scale)

    def _log_kernel(self, x):
        v = x[:, 0]
        lp = -0.5 * (v / self.scale) ** 2 - 0.5 * _LOG_2PI - np.log(self.scale)
        rest = x[:, 1:]
        k = self.dim - 1
        lp = lp - 0.5 * np.sum(rest**2, axis=1) * np.exp(-v) - 0.5 * k * (_LOG_2PI + v)
        return lp

    @property
    def true_log_z(self):
        return self.log_offset

    @property
    def entropy(self):
        return 0.5 * np.log(2 * np.pi * np.e * self.scale**2) + 0.5 * (self.dim - 1) * np.log(2 * np.pi * np.e)

    @property
    def mode_centers(self):
        return np.zeros((1, self.dim))

    def sample_reference(self, n, seed):
        rng = make_rng(seed, 0x7EF)
        v = self.scale * rng.standard_normal(n)
        rest = np.exp(0.5 * v)[:, None] * rng.standard_normal((n, self.dim - 1))
        return np.column_stack([v, rest])

    def quadrature_nodes(self, h=None):
        # trapezoid in (v, z) with x_2 = exp(v / 2) z, so the neck is resolved
        if self.dim != 2:
            raise ValueError("grid quadrature is only provided for dim <= 2")
        h = 0.05 if h is None else h
        vmax = 12 * self.scale
        v = np.linspace(-vmax, vmax, int(np.ceil(2 * vmax / h)) + 1)
        z = np.linspace(-12, 12, int(np.ceil(24 / h)) + 1)
        wv = np.full(v.size, v[1] - v[0])
        wv[[0, -1]] *= 0.5
        wz = np.full(z.size, z[1] - z[0])
        wz[[0, -1]] *= 0.5
        V, Zg = np.meshgrid(v, z, indexing="ij")
        nodes = np.column_stack([V.ravel(), (np.exp(0.5 * V) * Zg).ravel()])
        log_mass = (np.log(wv)[:, None] + np.log(wz)[None, :] + 0.5 * V).ravel()
        return nodes, log_mass

    @property
    def box(self):
        return [-4 * self.scale, -8.0], [4 * self.scale, 8.0]

    @property
    def scale_hint(self):
        return np.concatenate([[self.scale], np.full(self.dim - 1, np.exp(0.25 * self.scale**2))])


_REGISTRY = {"gauss1d": Gauss1D, "gmm_grid": GMMGrid, "many_well": ManyWell, "funnel": Funnel}


def make_target(spec: TargetSpec) -> Target:
    """Build the unnormalized log-density for ``spec``."""
    if isinstance(spec, str):
        spec = TargetSpec(spec)
    r = spec.resolved()
    target = _REGISTRY[r.name](dim=r.dim, **r.params)
    return target


@dataclass
class ReferenceStats:
    """Ground truth for one target.

    ``mode_masses`` are probabilities of the Voronoi cells of
    ``mode_centers``. ``hist`` is the normalized histogram on ``hist_edges``
    (one edge array per axis, dim <= 2 only); ``marginals`` holds one
    ``(grid, density)`` pair per axis, also dim <= 2 only.
    """

    mode_centers: np.ndarray
    mode_masses: np.ndarray
    entropy: float
    log_z: float
    hist_edges: list | None = None
    hist: np.ndarray | None = None
    marginals: list | None = None


def nearest_mode(points, centers) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def basin_masses(points, weights, centers) -> np.ndarray:
    """Mass of each Voronoi cell; points on a cell boundary are shared evenly."""
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    best = d2.min(axis=1, keepdims=True)
    tied = d2 <= best + 1e-9 * (1.0 + best)
    share = tied / tied.sum(axis=1, keepdims=True)
    return np.asarray(weights, dtype=float) @ share


def histogram_edges(target: Target, bins: int = 60) -> list:
    lo, hi = target.box
    return [np.linspace(a, b, bins + 1) for a, b in zip(lo[: target.dim], hi[: target.dim])]


def _quadrature_stats(target: Target, h=None):
    nodes, log_mass = target.quadrature_nodes(h)
    lp = target.log_prob(nodes)
    terms = log_mass + lp
    log_z = log_sum_exp(terms)
    mass = np.exp(terms - log_z)
    log_dens = lp - log_z
    entropy = float(-np.sum(mass * log_dens))
    return nodes, mass, float(log_z), entropy


def quadrature_log_z(target: Target, h=None) -> float:
    return _quadrature_stats(target, h)[2]


def reference_stats(spec, bins: int = 60) -> ReferenceStats:
    """Mode masses, histograms, entropy and ``log Z`` by deterministic quadrature.

    Targets with ``dim > 2`` fall back to their product structure or analytic
    expressions; histograms and marginals are then omitted.
    """
    target = spec if isinstance(spec, Target) else make_target(spec)
    centers = target.mode_centers
    if target.dim > 2:
        if isinstance(target, ManyWell):
            masses = np.full(len(centers), 1.0 / len(centers))
        else:
            masses = np.ones(len(centers))
        return ReferenceStats(centers, masses, float(target.entropy), float(target.true_log_z))

    nodes, mass, log_z, entropy = _quadrature_stats(target)
    fine_log_z = quadrature_log_z(target, 0.5 * (target.default_step if not isinstance(target, Funnel) else 0.05))
    if abs(fine_log_z - log_z) > 1e-6:
        raise RuntimeError(
            f"quadrature for {target!r} not converged: log Z {log_z!r} at h, {fine_log_z!r} at h/2"
        )
    masses = basin_masses(nodes, mass, centers)
    edges = histogram_edges(target, bins)
    hist, _ = np.histogramdd(nodes, bins=edges, weights=mass)
    marginals = []
    for ax in range(target.dim):
        e = edges[ax]
        m, _ = np.histogram(nodes[:, ax], bins=e, weights=mass)
        marginals.append((0.5 * (e[1:] + e[:-1]), m / np.diff(e)))
    if isinstance(target, Gauss1D):
        entropy, log_z = target.entropy, target.true_log_z
    return ReferenceStats(centers, masses, entropy, log_z, edges, hist, marginals)
