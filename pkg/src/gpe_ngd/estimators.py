"""Monte Carlo estimators: local energy, chemical potential, energy
components, the loss gradient, the local-variance residual, and the
virial ratio.

Conventions: psi is the raw (unnormalized) network output; Z normalizes
|psi|^2 to a density. The interaction term enters the energy with weight
beta/(2Z) and the local chemical potential with beta/Z, so the mean
chemical potential exceeds the energy by exactly the interaction energy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch
from .network import EvalBundle
from .normalization import ZEstimate

POTENTIAL_KINDS = ("harmonic", "lattice2d_a", "lattice2d_b", "lattice3d", "quad_form", "custom")


@dataclass(frozen=True)
class PotentialSpec:
    """Trap potential plus interaction strength.

    quad_form carries the SPD matrix in ``matrix`` (condition number
    recorded at construction); custom carries a callable of a batch.
    """

    kind: str
    beta: float
    dim: int
    matrix: np.ndarray | None = None
    func: object = None
    cond: float | None = None

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.kind == "lattice2d_a" or self.kind == "lattice2d_b":
            if self.dim != 2:
                raise DimensionMismatch(f"{self.kind} requires dim=2")
        if self.kind == "lattice3d" and self.dim != 3:
            raise DimensionMismatch("lattice3d requires dim=3")
        if self.kind == "quad_form":
            a = np.asarray(self.matrix, dtype=np.float64)
            if a.shape != (self.dim, self.dim):
                raise DimensionMismatch("quad_form matrix shape must be (dim, dim)")
            if not np.allclose(a, a.T, atol=1e-12):
                raise ValueError("quad_form matrix must be symmetric")
            evals = np.linalg.eigvalsh(a)
            if evals[0] <= 0:
                raise ValueError("quad_form matrix must be positive definite")
            object.__setattr__(self, "matrix", a)
            object.__setattr__(self, "cond", float(evals[-1] / evals[0]))
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom potential requires func")


def harmonic(dim: int, beta: float = 0.0) -> PotentialSpec:
    """V = |r|^2 / 2."""
    return PotentialSpec(kind="harmonic", beta=beta, dim=dim)


def lattice2d_a(beta: float = 250.0) -> PotentialSpec:
    """V = (x^2 + 4 y^2)/4 + 5 (sin^2 pi x + sin^2 pi y)."""
    return PotentialSpec(kind="lattice2d_a", beta=beta, dim=2)


def lattice2d_b(beta: float = 400.0) -> PotentialSpec:
    """V = (x^2 + y^2)/2 + (5/2)(sin^2(pi x/4) + sin^2(pi y/4))."""
    return PotentialSpec(kind="lattice2d_b", beta=beta, dim=2)


def lattice3d(beta: float = 200.0) -> PotentialSpec:
    """V = |r|^2/2 + (5/2) sum_i sin^2(pi r_i / 4)."""
    return PotentialSpec(kind="lattice3d", beta=beta, dim=3)


def quad_form(matrix: np.ndarray, beta: float) -> PotentialSpec:
    """V = r^T A r / 2 with SPD A."""
    a = np.asarray(matrix, dtype=np.float64)
    return PotentialSpec(kind="quad_form", beta=beta, dim=a.shape[0], matrix=a)


def random_quad_form(dim: int, beta: float, seed: int) -> PotentialSpec:
    """Seeded random SPD quadratic form with moderate condition number."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    a = g @ g.T / dim + 0.5 * np.eye(dim)
    a = a / np.trace(a) * dim  # unit average curvature
    return quad_form(a, beta)


def custom(func, dim: int, beta: float = 0.0) -> PotentialSpec:
    return PotentialSpec(kind="custom", beta=beta, dim=dim, func=func)


def potential_values(spec: PotentialSpec, R: np.ndarray) -> np.ndarray:
    """V at a batch of points (N, d) -> (N,)."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if R.shape[1] != spec.dim:
        raise DimensionMismatch(f"points have dim {R.shape[1]}, potential needs {spec.dim}")
    if spec.kind == "harmonic":
        return 0.5 * np.sum(R * R, axis=1)
    if spec.kind == "lattice2d_a":
        x, y = R[:, 0], R[:, 1]
        return 0.25 * (x * x + 4 * y * y) + 5.0 * (np.sin(np.pi * x) ** 2 + np.sin(np.pi * y) ** 2)
    if spec.kind == "lattice2d_b":
        x, y = R[:, 0], R[:, 1]
        return 0.5 * (x * x + y * y) + 2.5 * (
            np.sin(np.pi * x / 4) ** 2 + np.sin(np.pi * y / 4) ** 2
        )
    if spec.kind == "lattice3d":
        return 0.5 * np.sum(R * R, axis=1) + 2.5 * np.sum(np.sin(np.pi * R / 4) ** 2, axis=1)
    if spec.kind == "quad_form":
        return 0.5 * np.sum(R * (R @ spec.matrix.T), axis=1)
    return np.asarray(spec.func(R), dtype=np.float64)


def potential_eval(spec: PotentialSpec, r: np.ndarray) -> float:
    """V at a single point."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1:
        raise DimensionMismatch("potential_eval takes a single point")
    return float(potential_values(spec, r[None, :])[0])


def local_energy(bundle: EvalBundle, spec: PotentialSpec) -> np.ndarray:
    """E_L = -(1/2) lap_ratio + V, per sample."""
    v = potential_values(spec, bundle.positions)
    return -0.5 * bundle.lap_ratio + v


def local_chem_potential(e_local: np.ndarray, psi2: np.ndarray, z: ZEstimate, beta: float) -> np.ndarray:
    """mu_L = E_L + (beta/Z) |psi|^2, per sample."""
    return e_local + (beta / z.value) * psi2


@dataclass(frozen=True)
class LocalStats:
    """Per-batch local quantities and energy components."""

    e_local: np.ndarray
    mu_local: np.ndarray
    mu_bar: float
    energy: float
    kinetic: float
    potential: float
    interaction: float


def compute_local_stats(bundle: EvalBundle, spec: PotentialSpec, z: ZEstimate) -> LocalStats:
    """Energy L, mean chemical potential, and the component breakdown.

    L = mean(E_L) + (beta/2Z) mean(|psi|^2); mu_bar = L + interaction.
    """
    v = potential_values(spec, bundle.positions)
    e_local = -0.5 * bundle.lap_ratio + v
    psi2 = bundle.psi**2
    mu_local = e_local + (spec.beta / z.value) * psi2
    interaction = 0.5 * (spec.beta / z.value) * float(np.mean(psi2))
    energy = float(np.mean(e_local)) + interaction
    kinetic = float(np.mean(-0.5 * bundle.lap_ratio))
    potential = float(np.mean(v))
    mu_bar = float(np.mean(mu_local))
    return LocalStats(
        e_local=e_local,
        mu_local=mu_local,
        mu_bar=mu_bar,
        energy=energy,
        kinetic=kinetic,
        potential=potential,
        interaction=interaction,
    )


def grad_loss(bundle: EvalBundle, stats: LocalStats) -> np.ndarray:
    """g = (2/N) sum_n (mu_L(r_n) - mu_bar) O(r_n); batch-mean control variate."""
    n = bundle.n_samples
    if n < 2:
        raise ValueError("need at least two samples")
    weights = (stats.mu_local - stats.mu_bar).astype(bundle.score.dtype)
    g = bundle.score.T @ weights
    return (2.0 / n) * g.astype(np.float64)


def residual(mu_local: np.ndarray) -> float:
    """Population variance of mu_L; the squared eigenproblem residual."""
    mu_local = np.asarray(mu_local)
    if mu_local.size < 2:
        raise ValueError("need at least two samples")
    return float(np.var(mu_local))


def virial_ratio(stats: LocalStats, dim: int) -> float:
    """(2<T> + d <E_int>) / (2<V>); exactly 1 for quadratic-trap ground states."""
    if stats.potential <= 0:
        raise ValueError("virial ratio needs <V> > 0")
    return (2.0 * stats.kinetic + dim * stats.interaction) / (2.0 * stats.potential)
