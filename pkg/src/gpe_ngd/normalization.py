"""Partition function Z = integral of |psi|^2 over the box, by adaptive
defensive importance sampling.

The proposal is a mixture: a multivariate Gaussian tracking the sampled
density (truncated to the box by rejection) plus a uniform defensive
component that guarantees support everywhere in the box and keeps the
importance weights bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateCovariance, InsufficientCoverage
from .sampler import DomainBox, as_target

COV_INFLATION = 1.2
PILOT_DRAWS = 1000


@dataclass
class AdisProposal:
    """Gaussian + uniform mixture q on the domain box.

    ``gauss_cov`` stores the already-inflated proposal covariance;
    ``trunc_mass`` is the estimated probability mass of the Gaussian inside
    the box (from a pilot batch), used to renormalize the truncated density.
    """

    alpha: float
    gauss_mean: np.ndarray
    gauss_cov: np.ndarray
    box: DomainBox
    cov_factor: np.ndarray = None  # lower Cholesky factor
    trunc_mass: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.cov_factor is None:
            try:
                self.cov_factor = np.linalg.cholesky(self.gauss_cov)
            except np.linalg.LinAlgError as exc:
                raise DegenerateCovariance(f"proposal covariance not SPD: {exc}") from exc

    @property
    def dim(self) -> int:
        return self.gauss_mean.size

    def gauss_logpdf(self, R: np.ndarray) -> np.ndarray:
        dev = R - self.gauss_mean
        sol = solve_triangular(self.cov_factor, dev.T, lower=True)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self.cov_factor)))
        return -0.5 * (maha + logdet + self.dim * np.log(2.0 * np.pi))

    def density(self, R: np.ndarray) -> np.ndarray:
        """Mixture density on the box (Gaussian renormalized by trunc_mass)."""
        R = np.atleast_2d(R)
        q = np.full(len(R), (1.0 - self.alpha) / self.box.volume)
        if self.alpha > 0.0:
            q = q + self.alpha * np.exp(self.gauss_logpdf(R)) / self.trunc_mass
        return q


def make_initial_proposal(box: DomainBox, alpha: float = 0.8, scale: float = 1.0) -> AdisProposal:
    """Isotropic starting proposal before any walker statistics exist."""
    d = box.dim
    return AdisProposal(
        alpha=alpha,
        gauss_mean=np.zeros(d),
        gauss_cov=np.eye(d) * scale**2 * COV_INFLATION**2,
        box=box,
    )


def update_proposal(prev: AdisProposal, moments, ema: float = 0.5) -> AdisProposal:
    """EMA update of the Gaussian component toward the walker moments.

    The target covariance is inflated by COV_INFLATION^2 so the proposal
    over-covers the density. alpha is left unchanged. The truncation mass
    is re-estimated lazily at the next estimate_z call (set to 1 here and
    corrected by the pilot batch).
    """
    mean, cov = moments
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    cov = 0.5 * (cov + cov.T) + 1e-8 * np.eye(cov.shape[0])
    target_cov = COV_INFLATION**2 * cov
    new_mean = (1.0 - ema) * prev.gauss_mean + ema * mean
    new_cov = (1.0 - ema) * prev.gauss_cov + ema * target_cov
    try:
        factor = np.linalg.cholesky(new_cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance(f"updated proposal covariance not SPD: {exc}") from exc
    return replace(prev, gauss_mean=new_mean, gauss_cov=new_cov, cov_factor=factor, trunc_mass=1.0)


@dataclass(frozen=True)
class ZEstimate:
    value: float
    std_error: float
    n_samples: int
    ess: float

    def __post_init__(self):
        if self.value <= 0.0:
            raise ValueError("Z estimate must be positive")


def _sample_truncated_gaussian(q: AdisProposal, n: int, rng: np.random.Generator, max_rounds: int = 200):
    """Rejection-sample the Gaussian component into the box.

    Returns (samples, acceptance_rate_estimate). Raises
    InsufficientCoverage if the Gaussian has essentially no mass in the box.
    """
    d = q.dim
    out = np.empty((n, d))
    got = 0
    drawn = 0
    kept = 0
    for _ in range(max_rounds):
        need = n - got
        batch = max(need, 256)
        z = rng.standard_normal((batch, d))
        cand = q.gauss_mean + z @ q.cov_factor.T
        inside = q.box.contains(cand)
        drawn += batch
        kept += int(np.count_nonzero(inside))
        take = cand[inside][:need]
        out[got : got + len(take)] = take
        got += len(take)
        if got == n:
            break
    if got < n:
        raise InsufficientCoverage(0.0, n)
    return out, kept / drawn


def estimate_z_grid(params_or_target, box: DomainBox, n_per_axis: int = 100) -> ZEstimate:
    """Deterministic trapezoid quadrature of |psi|^2 on a tensor grid.

    Noise-free alternative for low dimensions; cost grows as n^d, so this
    is only sensible for d <= 3.
    """
    target = as_target(params_or_target)
    d = box.dim
    axes = [np.linspace(box.lower[i], box.upper[i], n_per_axis) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    wts = 1.0
    for i in range(d):
        w1 = np.full(n_per_axis, (box.upper[i] - box.lower[i]) / (n_per_axis - 1))
        w1[0] *= 0.5
        w1[-1] *= 0.5
        shape = [1] * d
        shape[i] = n_per_axis
        wts = wts * w1.reshape(shape)
    wts = wts.ravel()
    total = 0.0
    step = 65536
    for start in range(0, len(pts), step):
        sl = slice(start, start + step)
        total += float(np.sum(wts[sl] * np.exp(2.0 * target.log_abs(pts[sl]))))
    n_pts = len(pts)
    return ZEstimate(value=total, std_error=0.0, n_samples=n_pts, ess=float(n_pts))


def estimate_z(params_or_target, q: AdisProposal, n: int, seed: int) -> ZEstimate:
    """Monte Carlo estimate of Z with the mixture proposal.

    A pilot batch of Gaussian draws estimates the truncation mass so the
    truncated component is a proper density on the box. Raises
    InsufficientCoverage when the effective sample size drops below 1% of n.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    target = as_target(params_or_target)
    rng = np.random.default_rng(seed)

    if q.alpha > 0.0:
        _, acc = _sample_truncated_gaussian(q, min(PILOT_DRAWS, 4 * n), rng)
        trunc_mass = max(acc, 1e-12)
    else:
        trunc_mass = 1.0
    q = replace(q, trunc_mass=trunc_mass)

    pick_gauss = rng.random(n) < q.alpha
    n_gauss = int(np.count_nonzero(pick_gauss))
    samples = np.empty((n, q.dim))
    if n_gauss:
        samples[pick_gauss], _ = _sample_truncated_gaussian(q, n_gauss, rng)
    n_unif = n - n_gauss
    if n_unif:
        samples[~pick_gauss] = q.box.sample_uniform(rng, n_unif)

    psi2 = np.exp(2.0 * target.log_abs(samples))
    w = psi2 / q.density(samples)
    total = float(np.sum(w))
    value = total / n
    std_error = float(np.std(w, ddof=1) / np.sqrt(n))
    ess = total**2 / float(np.sum(w * w)) if total > 0 else 0.0
    if ess < 0.01 * n:
        raise InsufficientCoverage(ess, n)
    return ZEstimate(value=value, std_error=std_error, n_samples=n, ess=ess)
