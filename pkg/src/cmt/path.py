"""Pointwise intermediate densities and the (beta, alpha) path record.

Iterating the constrained update from ``q0`` gives the geometric-tempered form

    q_i  ∝  q0 ** (1 - beta_i) * p ** (alpha_i * beta_i)

with ``beta_{i+1} = 1 - (1 - beta_i) * lam_i / c_i`` and
``alpha_{i+1} beta_{i+1} = alpha_i beta_i * lam_i / c_i + 1 / c_i``,
``c_i = 1 + lam_i + eta_i``. The ledger keeps both representations checkable
against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import InvariantError, LogDensity, MultiplierPair, PathState, as_points

BETA_SLACK = 1e-12


@dataclass(frozen=True)
class IntermediateDensity:
    """``(lam * log q(x) + log p(x)) / (1 + lam + eta) - log_z``."""

    base: LogDensity
    target: LogDensity
    mult: MultiplierPair
    log_z: float

    @property
    def dim(self) -> int:
        return self.target.dim

    def log_prob(self, x) -> np.ndarray:
        x = as_points(x, self.dim)
        lp = np.asarray(self.target.log_prob(x), dtype=float)
        if self.mult.lam == 0.0:
            un = lp
        else:
            un = self.mult.lam * np.asarray(self.base.log_prob(x), dtype=float) + lp
        return un / self.mult.scale - self.log_z


def next_intermediate(base: LogDensity, target: LogDensity, mult: MultiplierPair, log_z: float) -> IntermediateDensity:
    if not np.isfinite(log_z):
        raise ValueError(f"log_z must be finite, got {log_z}")
    if base.dim != target.dim:
        raise ValueError("base and target dimensions differ")
    return IntermediateDensity(base, target, mult, float(log_z))


@dataclass(frozen=True)
class PathLedger:
    """Append-only record of path states; entry ``k`` describes ``q_k``.

    Entry ``k >= 1`` carries the multipliers that produced ``q_k`` from
    ``q_{k-1}`` together with that step's normalizer and ESS estimates.
    """

    entries: tuple = ()
    closed_form_enabled: bool = True

    @classmethod
    def start(cls, entropy_est: float = float("nan"), closed_form_enabled: bool = True) -> "PathLedger":
        first = PathState(step=0, beta=0.0, alpha=0.0, multipliers=None,
                          entropy_est=entropy_est, log_z_est=0.0, step_ess_frac=1.0)
        return cls((first,), closed_form_enabled)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> PathState:
        return self.entries[i]

    @property
    def last(self) -> PathState:
        return self.entries[-1]

    @property
    def betas(self) -> np.ndarray:
        return np.array([e.beta for e in self.entries])

    @property
    def alphas(self) -> np.ndarray:
        return np.array([e.alpha for e in self.entries])

    def with_last(self, **changes) -> "PathLedger":
        return PathLedger(self.entries[:-1] + (replace(self.entries[-1], **changes),), self.closed_form_enabled)


def advance_exponents(beta: float, alpha: float, mult: MultiplierPair) -> tuple[float, float]:
    """One step of the (beta, alpha) recursion."""
    # 1 - (1 - beta) lam / c and (alpha beta lam + 1) / c, written over the
    # common denominator c so that eta = 0 gives alpha = 1 and lam = 0 gives
    # beta = 1 exactly in floating point (c summed in the numerator's order)
    c = 1.0 + mult.eta + mult.lam
    num_beta = 1.0 + mult.eta + beta * mult.lam
    num_alpha_beta = alpha * beta * mult.lam + 1.0
    # the increment (1 - beta)(1 + eta) / c is non-negative; clamp away rounding
    new_beta = min(max(num_beta / c, beta), 1.0)
    new_alpha = num_alpha_beta / num_beta
    return new_beta, min(max(new_alpha, 0.0), 1.0)


def update_ledger(
    ledger: PathLedger,
    mult: MultiplierPair,
    entropy_est: float,
    log_z: float,
    step_ess: float,
    *,
    beta: float | None = None,
    converged: bool = True,
) -> PathLedger:
    """Append the state produced by applying ``mult`` to the last entry.

    ``beta`` overrides the recursion for fixed schedules; it must then agree
    with a valid monotone path.
    """
    if not ledger.entries:
        ledger = PathLedger.start(closed_form_enabled=ledger.closed_form_enabled)
    prev = ledger.last
    new_beta, new_alpha = advance_exponents(prev.beta, prev.alpha, mult)
    if beta is not None:
        new_beta = float(beta)
    if new_beta < prev.beta - BETA_SLACK:
        raise InvariantError(
            f"beta decreased from {prev.beta!r} to {new_beta!r} at step {prev.step + 1}; multipliers corrupted?"
        )
    if not (0.0 <= new_beta <= 1.0):
        raise InvariantError(f"beta={new_beta} outside [0, 1]")
    state = PathState(
        step=prev.step + 1,
        beta=new_beta,
        alpha=new_alpha,
        multipliers=mult,
        entropy_est=float(entropy_est),
        log_z_est=float(log_z),
        step_ess_frac=float(step_ess),
        converged=converged,
    )
    return PathLedger(ledger.entries + (state,), ledger.closed_form_enabled)


def closed_form_log_density(ledger: PathLedger, q0: LogDensity, target: LogDensity, i: int, x) -> np.ndarray:
    """Unnormalized ``(1 - beta_i) log q0(x) + alpha_i beta_i log p(x)``."""
    if not ledger.closed_form_enabled:
        raise ValueError("closed-form evaluation needs the initial density kept for the whole run")
    if not 0 <= i < len(ledger):
        raise IndexError(f"step {i} out of range [0, {len(ledger) - 1}]")
    e = ledger[i]
    x = as_points(x, target.dim)
    out = (1.0 - e.beta) * np.asarray(q0.log_prob(x), dtype=float)
    if e.alpha * e.beta != 0.0:
        out = out + e.alpha * e.beta * np.asarray(target.log_prob(x), dtype=float)
    return out


def iterated_log_density(ledger: PathLedger, q0: LogDensity, target: LogDensity, i: int, x) -> np.ndarray:
    """Compose the pointwise update ``i`` times from ``q0`` (normalizers set to 0)."""
    if not 0 <= i < len(ledger):
        raise IndexError(f"step {i} out of range [0, {len(ledger) - 1}]")
    density: LogDensity = q0
    for k in range(1, i + 1):
        density = next_intermediate(density, target, ledger[k].multipliers, 0.0)
    return np.asarray(density.log_prob(x), dtype=float)
