"""Density handles, the weighted sample buffer and stable reductions.

Everything is carried in log space. A buffer stores raw log-densities of the
generating model (``log_q``) and of the unnormalized target (``log_p``);
importance weights are always derived downstream from the current
multipliers.

Random numbers come from numpy's ``PCG64`` bit generator seeded through a
``SeedSequence`` built from the run seed and a tuple of integer keys (step
index, purpose tag). ``SeedSequence`` hashing is specified and stable across
platforms, so seeded runs reproduce bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np

MULTIPLIER_MAX = 1e10


class CMTError(Exception):
    """Base class for errors raised by the sampler."""


class DegenerateBufferError(CMTError):
    """The target vanishes on every buffer row, so no weight can be formed."""


class InvariantError(CMTError):
    """A mathematical invariant of the annealing path was violated."""


@runtime_checkable
class LogDensity(Protocol):
    """Anything with a dimension and a vectorized unnormalized log-density."""

    dim: int

    def log_prob(self, x: np.ndarray) -> np.ndarray: ...


class FunctionDensity:
    """Wrap a vectorized callable ``f(x) -> log density`` as a :class:`LogDensity`.

    Args:
        fn: maps an ``(n, dim)`` array to ``n`` log-densities.
        dim: dimension of the space.
        name: label used in error messages.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int, name: str = "density"):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self._fn = fn
        self.dim = int(dim)
        self.name = name

    def log_prob(self, x):
        x = as_points(x, self.dim)
        return np.asarray(self._fn(x), dtype=float).reshape(x.shape[0])

    def __repr__(self):
        return f"FunctionDensity({self.name!r}, dim={self.dim})"


def as_points(x, dim: int) -> np.ndarray:
    """Coerce ``x`` to a float array of shape ``(n, dim)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, dim) if dim > 1 else x.reshape(-1, 1)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``."""
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError("seed and keys must be non-negative integers")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def log_sum_exp(values, axis=None):
    """Numerically stable ``log(sum(exp(values)))``.

    ``-inf`` entries are absorbed; an all ``-inf`` input gives ``-inf``.
    Raises ``ValueError`` on empty input or on ``nan``/``+inf`` entries.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if np.isnan(v).any() or np.isposinf(v).any():
        raise ValueError("log_sum_exp entries must lie in [-inf, +finite]")
    m = np.max(v, axis=axis, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe_m), axis=axis, keepdims=True)) + safe_m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(values) -> float:
    v = np.asarray(values, dtype=float)
    return log_sum_exp(v) - np.log(v.size)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WeightedBuffer:
    """Samples with cached model and target log-densities.

    ``log_mass`` is the log of each row's mass under the generating model. It
    is ``-log N`` for Monte Carlo draws; quadrature buffers built by
    :func:`quadrature_buffer` carry node masses instead, which turns every
    estimator below into a deterministic quadrature rule.
    """

    points: np.ndarray
    log_q: np.ndarray
    log_p: np.ndarray
    rng_seed: int = 0
    log_mass: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        n = pts.shape[0]
        log_q = np.asarray(self.log_q, dtype=float).reshape(-1)
        log_p = np.asarray(self.log_p, dtype=float).reshape(-1)
        if n < 1:
            raise ValueError("buffer must hold at least one row")
        if log_q.shape[0] != n or log_p.shape[0] != n:
            raise ValueError(
                f"buffer arrays disagree in length: points={n}, log_q={log_q.shape[0]}, log_p={log_p.shape[0]}"
            )
        if not np.all(np.isfinite(log_q)):
            raise ValueError("log_q must be finite on the generating model's own samples")
        if np.isnan(log_p).any() or np.isposinf(log_p).any():
            raise ValueError("log_p must lie in [-inf, +finite]")
        if self.log_mass is None:
            log_mass = np.full(n, -np.log(n))
        else:
            log_mass = np.asarray(self.log_mass, dtype=float).reshape(-1)
            if log_mass.shape[0] != n:
                raise ValueError("log_mass length differs from the buffer length")
            log_mass = log_mass - log_sum_exp(log_mass)
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "log_q", _frozen(log_q))
        object.__setattr__(self, "log_p", _frozen(log_p))
        object.__setattr__(self, "log_mass", _frozen(log_mass))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.log_mass == self.log_mass[0]))

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class MultiplierPair:
    """Trust-region multiplier ``lam`` and entropy multiplier ``eta``."""

    lam: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        for name in ("lam", "eta"):
            v = float(getattr(self, name))
            if not (0.0 <= v <= MULTIPLIER_MAX):
                raise ValueError(f"{name}={v} outside [0, {MULTIPLIER_MAX:g}]")
            object.__setattr__(self, name, v)

    @property
    def scale(self) -> float:
        """``1 + lam + eta``, the common denominator of the update exponents."""
        return 1.0 + self.lam + self.eta


@dataclass(frozen=True)
class PathState:
    """One row of the annealing record."""

    step: int
    beta: float
    alpha: float
    multipliers: MultiplierPair | None
    entropy_est: float = float("nan")
    log_z_est: float = float("nan")
    step_ess_frac: float = float("nan")
    converged: bool = True

    def as_record(self) -> dict:
        m = self.multipliers
        return {
            "step": self.step,
            "lambda": None if m is None else m.lam,
            "eta": None if m is None else m.eta,
            "beta": self.beta,
            "alpha": self.alpha,
            "entropy": _json_float(self.entropy_est),
            "step_ess": _json_float(self.step_ess_frac),
            "log_z_hat": _json_float(self.log_z_est),
        }


def _json_float(v):
    return None if v is None or not np.isfinite(v) else float(v)


def _check_target_values(points, log_p):
    bad = np.flatnonzero(np.isnan(log_p) | np.isposinf(log_p))
    if bad.size:
        k = int(bad[0])
        raise CMTError(
            f"target returned {log_p[k]} at buffer row {k}, point {points[k].tolist()}"
        )


def draw_buffer(model, target: LogDensity, n: int, seed: int) -> WeightedBuffer:
    """Draw ``n`` samples from ``model`` and cache both log-densities.

    ``model`` needs ``dim``, ``sample(n, seed)`` and ``log_prob``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if model.dim != target.dim:
        raise ValueError(f"model dim {model.dim} != target dim {target.dim}")
    points = as_points(model.sample(n, seed), model.dim)
    log_q = np.asarray(model.log_prob(points), dtype=float)
    log_p = np.asarray(target.log_prob(points), dtype=float)
    _check_target_values(points, log_p)
    return WeightedBuffer(points, log_q, log_p, rng_seed=seed)


def quadrature_buffer(model: LogDensity, target: LogDensity, nodes, log_node_mass) -> WeightedBuffer:
    """Represent ``model`` as a discrete measure on quadrature nodes.

    Row masses are ``node_mass * q(node)``; estimators over the result are
    quadrature rules for the corresponding integrals. Nodes where the model
    density underflows are dropped.
    """
    nodes = as_points(nodes, model.dim)
    log_q = np.asarray(model.log_prob(nodes), dtype=float)
    log_p = np.asarray(target.log_prob(nodes), dtype=float)
    _check_target_values(nodes, log_p)
    keep = np.isfinite(log_q)
    log_mass = np.broadcast_to(np.asarray(log_node_mass, dtype=float), log_q.shape) + log_q
    keep &= log_mass > log_sum_exp(log_mass[keep]) - 80.0
    return WeightedBuffer(nodes[keep], log_q[keep], log_p[keep], log_mass=log_mass[keep])


def entropy_estimate(buffer: WeightedBuffer) -> float:
    """Monte Carlo (or quadrature) estimate of ``H(q) = -E_q[log q]`` in nats."""
    mass = np.exp(buffer.log_mass)
    return float(-np.sum(mass * buffer.log_q))


def entropy_standard_error(buffer: WeightedBuffer) -> float:
    """Standard error of :func:`entropy_estimate`; zero for quadrature buffers."""
    if not buffer.is_uniform or buffer.n < 2:
        return 0.0
    return float(np.std(buffer.log_q, ddof=1) / np.sqrt(buffer.n))
