"""Intermediate normalizers and maximization of the concave dual functions.

For multipliers ``(lam, eta)`` the next intermediate density is

    q_next(x) = q(x) ** (lam / c) * p(x) ** (1 / c) / Z,    c = 1 + lam + eta,

and ``Z`` is an expectation under the current model ``q``:

    Z = E_q[(p(x) / q(x) ** (1 + eta)) ** (1 / c)].

The dual of the combined problem is

    g(lam, eta) = -c log Z - lam * eps_tr + eta * (H(q) - eps_ent),

whose partial derivatives are ``KL(q_next || q) - eps_tr`` and
``H(q) - H(q_next) - eps_ent``, so each multiplier is zero exactly when its
constraint is slack.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .core import (
    MULTIPLIER_MAX,
    CMTError,
    DegenerateBufferError,
    MultiplierPair,
    WeightedBuffer,
    entropy_estimate,
    log_sum_exp,
)

log = logging.getLogger(__name__)

MAX_ROUNDS = 50


class DualConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class DualConfig:
    eps_tr: float = 0.3
    eps_ent: float = 0.5
    tr_enabled: bool = True
    ent_enabled: bool = True
    multiplier_max: float = MULTIPLIER_MAX
    init_guess: float = 1e-20
    tol: float = 1e-8

    def __post_init__(self):
        if self.tr_enabled and not self.eps_tr > 0:
            raise ValueError(f"eps_tr must be positive, got {self.eps_tr}")
        if self.ent_enabled and not self.eps_ent > 0:
            raise ValueError(f"eps_ent must be positive, got {self.eps_ent}")
        if not 0 < self.init_guess < self.multiplier_max:
            raise ValueError("init_guess must lie strictly inside (0, multiplier_max)")
        if not 0 < self.multiplier_max <= MULTIPLIER_MAX:
            raise ValueError(f"multiplier_max must lie in (0, {MULTIPLIER_MAX:g}]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def log_tilt(buffer: WeightedBuffer, mult: MultiplierPair) -> np.ndarray:
    """Per-row ``log(q_next / q)`` up to the constant ``-log Z``."""
    return (buffer.log_p - (1.0 + mult.eta) * buffer.log_q) / mult.scale


def log_z_estimate(buffer: WeightedBuffer, mult: MultiplierPair) -> float:
    """Estimate ``log Z(lam, eta)`` of the next intermediate density."""
    terms = buffer.log_mass + log_tilt(buffer, mult)
    out = log_sum_exp(terms)
    if out == -np.inf:
        raise DegenerateBufferError("degenerate buffer: target vanishes on all samples")
    return out


def dual_tr(buffer: WeightedBuffer, lam: float, cfg: DualConfig) -> float:
    """Trust-region dual ``-(1 + lam) log Z(lam) - lam * eps_tr``."""
    if lam < 0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    mult = MultiplierPair(lam, 0.0)
    return -(1.0 + lam) * log_z_estimate(buffer, mult) - lam * cfg.eps_tr


def dual_ent(buffer: WeightedBuffer, eta: float, cfg: DualConfig, entropy: float | None = None) -> float:
    """Entropy-only dual ``-(1 + eta) log Z(eta) + eta * (H(q) - eps_ent)``."""
    return dual_tr_ent(buffer, MultiplierPair(0.0, eta), cfg, entropy)


def dual_tr_ent(
    buffer: WeightedBuffer, mult: MultiplierPair, cfg: DualConfig, entropy: float | None = None
) -> float:
    """Combined dual. ``H(q)`` defaults to the buffer's own entropy estimate."""
    if entropy is None:
        entropy = entropy_estimate(buffer)
    value = -mult.scale * log_z_estimate(buffer, mult) - mult.lam * cfg.eps_tr
    if mult.eta:
        value += mult.eta * (entropy - cfg.eps_ent)
    return value


def dual_gradient(
    buffer: WeightedBuffer, mult: MultiplierPair, cfg: DualConfig, entropy: float | None = None
) -> tuple[float, float]:
    """Exact buffer partials of :func:`dual_tr_ent` in ``lam`` and ``eta``."""
    if entropy is None:
        entropy = entropy_estimate(buffer)
    d_lam = step_kl(buffer, mult) - cfg.eps_tr
    d_eta = entropy - next_entropy(buffer, mult) - cfg.eps_ent
    return d_lam, d_eta


def _checked(f, x):
    y = f(x)
    if not np.isfinite(y):
        raise CMTError(f"objective is {y} at probe x={x!r}")
    return float(y)


def maximize_scalar(f, lo: float, hi: float, tol: float = 1e-8, n_grid: int = 33) -> float:
    """Bounded derivative-free maximization of a unimodal scalar function.

    A uniform grid locates the bracket around the best probe; bounded Brent
    refines inside it. The best of grid, refinement and both endpoints is
    returned, with ties resolved toward ``lo`` so a maximum on the lower
    boundary is reported exactly.
    """
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    xs = np.linspace(lo, hi, n_grid)
    fs = np.array([_checked(f, x) for x in xs])
    k = int(np.argmax(fs))
    best_x, best_f = float(xs[k]), float(fs[k])
    a = float(xs[max(k - 1, 0)])
    b = float(xs[min(k + 1, n_grid - 1)])
    res = minimize_scalar(
        lambda x: -_checked(f, x),
        bounds=(a, b),
        method="bounded",
        options={"xatol": tol, "maxiter": 500},
    )
    fx = -float(res.fun)
    if fx > best_f:
        best_x, best_f = float(res.x), fx
    if _checked(f, lo) >= best_f:
        best_x = float(lo)
    return best_x


WINDOW = 2.0


def _polish(dg, m: float, cfg: DualConfig) -> float:
    # Derivative-free search locates an interior maximum only to about
    # sqrt(machine eps) relative; a root solve on the exact partial derivative
    # in a small bracket recovers full precision.
    if dg is None or m <= 0.0:
        return m
    for rel in (1e-7, 1e-5):
        a, b = max(m * (1.0 - rel), 0.0), min(m * (1.0 + rel), cfg.multiplier_max)
        fa, fb = dg(a), dg(b)
        if np.isfinite(fa) and np.isfinite(fb) and fa > 0.0 > fb:
            return brentq(dg, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    return m


def _multiplier_search(g, cfg: DualConfig, around: float | None = None, dg=None) -> float:
    # Search in u = log1p(m) to span the 20 orders of magnitude between the
    # initial guess and the upper bound. With ``around``, a window of
    # +-WINDOW in u is tried first; the dual is concave, hence unimodal in u,
    # so an interior maximum of the window is the global one.
    u_max = math.log1p(cfg.multiplier_max)

    def gu(u):
        return g(math.expm1(u))

    u = None
    if around is not None:
        u0 = math.log1p(around)
        lo, hi = max(0.0, u0 - WINDOW), min(u_max, u0 + WINDOW)
        u = maximize_scalar(gu, lo, hi, tol=cfg.tol, n_grid=9)
        edge = WINDOW * 1e-6
        if (lo > 0.0 and u - lo < edge) or (hi < u_max and hi - u < edge):
            u = None
    if u is None:
        u = maximize_scalar(gu, 0.0, u_max, tol=cfg.tol)
    m = min(max(math.expm1(u), 0.0), cfg.multiplier_max)
    return _polish(dg, m, cfg)


def _pattern_move(g2, x, d, cfg: DualConfig):
    """Maximize ``g2`` along ``x + t d``, ``t >= 0``, inside the box."""
    t_max = math.inf
    for xi, di in zip(x, d):
        if di > 0:
            t_max = min(t_max, (cfg.multiplier_max - xi) / di)
        elif di < 0:
            t_max = min(t_max, -xi / di)
    if not (0.0 < t_max < math.inf):
        return x

    def point(s):
        t = math.expm1(s)
        return np.clip(x + t * d, 0.0, cfg.multiplier_max)

    s = maximize_scalar(lambda s: g2(*point(s)), 0.0, math.log1p(t_max), tol=cfg.tol, n_grid=9)
    return point(s)


@dataclass(frozen=True)
class DualSolution:
    multipliers: MultiplierPair
    rounds: int
    converged: bool
    value: float


def solve_multipliers(buffer: WeightedBuffer, cfg: DualConfig) -> MultiplierPair:
    """Maximize the step's dual; see :func:`solve_dual` for diagnostics."""
    return solve_dual(buffer, cfg).multipliers


def solve_dual(buffer: WeightedBuffer, cfg: DualConfig) -> DualSolution:
    """Solve for the optimal ``(lam, eta)`` on one buffer.

    With both constraints enabled, bounded coordinate ascent alternates exact
    1D maximizations in ``lam`` and ``eta``, with an extrapolation along each
    round's displacement that is kept only if it raises the dual. It stops
    once a round moves neither coordinate by more than ``tol * (1 + value)``,
    or after 50 rounds, in which case a :class:`DualConvergenceWarning` is
    issued and the last iterate returned.
    """
    if not (cfg.tr_enabled or cfg.ent_enabled):
        raise ValueError("at least one constraint must be enabled")
    entropy = entropy_estimate(buffer)

    def g(lam, eta):
        return dual_tr_ent(buffer, MultiplierPair(lam, eta), cfg, entropy)

    def d_lam(eta):
        return lambda m: step_kl(buffer, MultiplierPair(m, eta)) - cfg.eps_tr

    def d_eta(lam):
        return lambda m: entropy - next_entropy(buffer, MultiplierPair(lam, m)) - cfg.eps_ent

    if not cfg.ent_enabled:
        lam = _multiplier_search(lambda m: g(m, 0.0), cfg, dg=d_lam(0.0))
        return DualSolution(MultiplierPair(lam, 0.0), 1, True, g(lam, 0.0))
    if not cfg.tr_enabled:
        eta = _multiplier_search(lambda m: g(0.0, m), cfg, dg=d_eta(0.0))
        return DualSolution(MultiplierPair(0.0, eta), 1, True, g(0.0, eta))

    lam = eta = cfg.init_guess
    converged = False
    rounds = 0
    for rounds in range(1, MAX_ROUNDS + 1):
        first = rounds == 1
        new_lam = _multiplier_search(lambda m: g(m, eta), cfg, None if first else lam, d_lam(eta))
        new_eta = _multiplier_search(lambda m: g(new_lam, m), cfg, None if first else eta, d_eta(new_lam))
        moved = max(
            abs(new_lam - lam) / (1.0 + new_lam),
            abs(new_eta - eta) / (1.0 + new_eta),
        )
        if moved <= cfg.tol:
            lam, eta = new_lam, new_eta
            converged = True
            break
        x = np.array([new_lam, new_eta])
        if not first:
            # extrapolate along the round's displacement to cut the zig-zag
            # of coordinate ascent on a curved ridge
            cand = _pattern_move(g, x, x - np.array([lam, eta]), cfg)
            if g(*cand) > g(*x):
                x = cand
        lam, eta = float(x[0]), float(x[1])
    if not converged:
        msg = f"coordinate ascent did not converge in {MAX_ROUNDS} rounds (lam={lam:.6g}, eta={eta:.6g})"
        warnings.warn(msg, DualConvergenceWarning, stacklevel=2)
        log.warning(msg)
    return DualSolution(MultiplierPair(lam, eta), rounds, converged, g(lam, eta))


def step_kl(buffer: WeightedBuffer, mult: MultiplierPair) -> float:
    """Buffer estimate of ``KL(q_next || q)`` under self-normalized weights."""
    lw = buffer.log_mass + log_tilt(buffer, mult)
    lw = lw - log_sum_exp(lw)
    w = np.exp(lw)
    ok = w > 0
    return float(np.sum(w[ok] * (lw[ok] - buffer.log_mass[ok])))


def next_entropy(buffer: WeightedBuffer, mult: MultiplierPair) -> float:
    """Buffer estimate of ``H(q_next)``."""
    lt = log_tilt(buffer, mult)
    log_z = log_sum_exp(buffer.log_mass + lt)
    lw = buffer.log_mass + lt - log_z
    w = np.exp(lw)
    log_next = (mult.lam * buffer.log_q + buffer.log_p) / mult.scale - log_z
    ok = w > 0
    return float(-np.sum(w[ok] * log_next[ok]))
