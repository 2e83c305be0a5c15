"""Markov chain Monte Carlo sampling of p(r) = |psi(r)|^2 restricted to a box.

Two kernels are provided: random-walk Metropolis-Hastings and Hamiltonian
Monte Carlo with potential U = -2 ln|psi|. The target density is zero
outside the domain box, so proposals and trajectories that exit the box
are rejected. Step sizes adapt multiplicatively toward a target acceptance
rate until the ensemble is frozen (after burn-in), which preserves
detailed balance during measurement sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateCovariance
from .network import Params, log_abs, log_abs_and_drift

MH_TARGET_ACCEPT = 0.5
HMC_TARGET_ACCEPT = 0.8
ADAPT_BOUNDS = (0.8, 1.25)


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box [lower, upper] in trap units."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower/upper must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box requires lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, half_width: float, dim: int) -> "DomainBox":
        return cls(-half_width * np.ones(dim), half_width * np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, R: np.ndarray) -> np.ndarray:
        R = np.atleast_2d(R)
        return np.all((R >= self.lower) & (R <= self.upper), axis=1)

    def sample_uniform(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


class _ParamsTarget:
    """Adapter exposing the network as a sampling target."""

    def __init__(self, params: Params):
        self.params = params

    def log_abs(self, R):
        return log_abs(self.params, R)

    def log_abs_and_drift(self, R):
        return log_abs_and_drift(self.params, R)


class AnalyticTarget:
    """Sampling target from a closed-form ln|psi| (tests, diagnostics)."""

    def __init__(self, log_abs_fn, drift_fn=None):
        self._f = log_abs_fn
        self._g = drift_fn

    def log_abs(self, R):
        return self._f(np.atleast_2d(R))

    def log_abs_and_drift(self, R):
        R = np.atleast_2d(R)
        if self._g is None:
            raise ValueError("no drift function supplied")
        return self._f(R), self._g(R)


def as_target(target):
    return _ParamsTarget(target) if isinstance(target, Params) else target


@dataclass
class WalkerEnsemble:
    """Positions with cached 2 ln|psi| and adaptation state.

    The generator advances as sweeps run; reproducibility comes from
    seeding at construction and applying an identical sweep schedule.
    """

    positions: np.ndarray
    box: DomainBox
    log_density: np.ndarray | None
    step_size: float
    rng: np.random.Generator
    acceptance_rate: float = 0.0
    frozen: bool = False
    total_proposed: int = 0
    total_accepted: int = 0

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]

    def freeze(self) -> "WalkerEnsemble":
        return replace(self, frozen=True)


def init_ensemble(n_walkers: int, box: DomainBox, init_scale: float, seed: int, step_size: float = 0.5) -> WalkerEnsemble:
    """Walkers drawn i.i.d. normal(0, init_scale^2) and clipped into the box."""
    if n_walkers < 1:
        raise ValueError("n_walkers must be >= 1")
    rng = np.random.default_rng(seed)
    pos = init_scale * rng.standard_normal((n_walkers, box.dim))
    pos = np.clip(pos, box.lower, box.upper)
    return WalkerEnsemble(
        positions=pos, box=box, log_density=None, step_size=float(step_size), rng=rng
    )


def _adapt(step, acc, target):
    factor = np.clip(np.exp(acc - target), *ADAPT_BOUNDS)
    return float(step * factor)


def mh_sweep(ens: WalkerEnsemble, target, n_steps: int) -> WalkerEnsemble:
    """n_steps isotropic-Gaussian Metropolis updates per walker.

    Acceptance ratio exp(2 delta ln|psi|); proposals outside the box are
    rejected outright (target density is zero there).
    """
    target = as_target(target)
    pos = ens.positions.copy()
    logd = ens.log_density
    if logd is None:
        logd = 2.0 * target.log_abs(pos)
    else:
        logd = logd.copy()
    rng = ens.rng
    n, d = pos.shape
    accepted = 0
    for _ in range(n_steps):
        prop = pos + ens.step_size * rng.standard_normal((n, d))
        inside = ens.box.contains(prop)
        logd_prop = np.full(n, -np.inf)
        if np.any(inside):
            logd_prop[inside] = 2.0 * target.log_abs(prop[inside])
        u = rng.random(n)
        with np.errstate(invalid="ignore", over="ignore"):
            accept = inside & (u < np.exp(np.minimum(0.0, logd_prop - logd)))
        pos[accept] = prop[accept]
        logd[accept] = logd_prop[accept]
        accepted += int(np.count_nonzero(accept))
    proposed = n * max(n_steps, 1) if n_steps > 0 else 0
    acc_rate = accepted / proposed if proposed else ens.acceptance_rate
    new_step = ens.step_size if (ens.frozen or n_steps == 0) else _adapt(ens.step_size, acc_rate, MH_TARGET_ACCEPT)
    return replace(
        ens,
        positions=pos,
        log_density=logd,
        acceptance_rate=acc_rate if n_steps else ens.acceptance_rate,
        step_size=new_step,
        total_proposed=ens.total_proposed + proposed,
        total_accepted=ens.total_accepted + accepted,
    )


def leapfrog(q, p, step, n_steps, grad_u):
    """Velocity-Verlet integration of H = U(q) + |p|^2 / 2."""
    q = q.copy()
    p = p - 0.5 * step * grad_u(q)
    for i in range(n_steps):
        q = q + step * p
        g = grad_u(q)
        p = p - step * (0.5 if i == n_steps - 1 else 1.0) * g
    return q, p


def hmc_sweep(ens: WalkerEnsemble, target, n_leapfrog: int) -> WalkerEnsemble:
    """One HMC trajectory per walker with U = -2 ln|psi|.

    Trajectories leaving the box at any leapfrog step are rejected, which
    is the Metropolis-consistent treatment of the truncated density.
    """
    if n_leapfrog == 0:
        return ens
    target = as_target(target)
    pos = ens.positions
    n, d = pos.shape
    rng = ens.rng

    logp0, drift0 = target.log_abs_and_drift(pos)
    u0 = -2.0 * logp0
    grad0 = -2.0 * drift0

    mom0 = rng.standard_normal((n, d))
    h0 = u0 + 0.5 * np.sum(mom0 * mom0, axis=1)

    step = ens.step_size
    q = pos.copy()
    p = mom0 - 0.5 * step * grad0
    exited = np.zeros(n, dtype=bool)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for i in range(n_leapfrog):
            q = q + step * p
            exited |= ~ens.box.contains(q)
            qc = np.clip(q, ens.box.lower, ens.box.upper)  # keep evals finite
            logp, drift = target.log_abs_and_drift(qc)
            g = -2.0 * drift
            p = p - step * (0.5 if i == n_leapfrog - 1 else 1.0) * g
        u1 = -2.0 * logp
        h1 = u1 + 0.5 * np.sum(p * p, axis=1)

        u = rng.random(n)
        accept = (~exited) & (u < np.exp(np.minimum(0.0, h0 - h1)))
    new_pos = pos.copy()
    new_pos[accept] = qc[accept]
    new_logd = 2.0 * logp0  # fresh values: any cache may predate a theta update
    new_logd[accept] = 2.0 * logp[accept]

    acc_rate = float(np.count_nonzero(accept)) / n
    new_step = ens.step_size if ens.frozen else _adapt(ens.step_size, acc_rate, HMC_TARGET_ACCEPT)
    return replace(
        ens,
        positions=new_pos,
        log_density=new_logd,
        acceptance_rate=acc_rate,
        step_size=new_step,
        total_proposed=ens.total_proposed + n,
        total_accepted=ens.total_accepted + int(np.count_nonzero(accept)),
    )


def ensemble_moments(ens: WalkerEnsemble):
    """Sample mean and unbiased covariance, symmetrized.

    Raises DegenerateCovariance when the covariance is numerically
    singular (e.g. all walkers coincide); the 1e-8 jitter downstream
    cannot rescue an exactly rank-deficient ensemble.
    """
    pos = ens.positions
    if pos.shape[0] < 2:
        raise ValueError("need at least two walkers for moments")
    mean = pos.mean(axis=0)
    dev = pos - mean
    cov = dev.T @ dev / (pos.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    evals = np.linalg.eigvalsh(cov)
    if evals[0] <= 1e-12 * max(evals[-1], 1.0):
        raise DegenerateCovariance(
            f"covariance nearly singular: min eig {evals[0]:.3e}, max {evals[-1]:.3e}"
        )
    return mean, cov


def integrated_autocorr_time(series: np.ndarray, max_lag: int | None = None) -> float:
    """IAT by summing autocorrelations until the first negative value."""
    x = np.asarray(series, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    if max_lag is None:
        max_lag = n // 4
    var = np.dot(x, x) / n
    if var == 0:
        return 1.0
    tau = 1.0
    for lag in range(1, max_lag):
        c = np.dot(x[:-lag], x[lag:]) / n / var
        if c <= 0:
            break
        tau += 2.0 * c
    return tau
