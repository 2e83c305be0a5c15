"""Sobolev Gram operator, randomized Nystrom preconditioner, and PCG.

The Gram matrix is the metric of the parameter tangent space under the
energy-adaptive inner product. Its entries are Monte Carlo expectations of

    W dO_i dO_j + (1/2) F . (grad O_i dO_j + grad O_j dO_i)
    + (1/2) grad O_i . grad O_j

with centered scores dO, drift F, and generalized energy density
W = V + (beta/Z) |psi|^2 + |F|^2 / 2. The operator is only ever applied
matrix-free through batched contractions; a dense assembly exists for
tests and the explicit-solve ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Breakdown, RankDeficient, SizeGuard
from .estimators import PotentialSpec, potential_values
from .network import EvalBundle
from .normalization import ZEstimate

DENSE_GUARD = 4096


@dataclass
class GramContext:
    """Per-batch arrays defining the matrix-free Gram operator.

    J is the centered score (N, P); K holds the mixed derivatives
    dimension-major, K[j] of shape (N, P); F is the drift (N, d); W the
    generalized energy density (N,).
    """

    J: np.ndarray
    K: np.ndarray
    F: np.ndarray
    W: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.J.shape[0]

    @property
    def n_params(self) -> int:
        return self.J.shape[1]

    @property
    def dim(self) -> int:
        return self.F.shape[1]


def build_gram_context(
    bundle: EvalBundle, spec: PotentialSpec, z: ZEstimate, dtype=None
) -> GramContext:
    """Center the scores and assemble the weight field.

    K is shared with the bundle when no dtype change is requested (it is
    read-only in the contractions).
    """
    if bundle.mixed is None:
        raise ValueError("bundle was evaluated without mixed derivatives")
    dtype = bundle.score.dtype if dtype is None else np.dtype(dtype)
    j = bundle.score.astype(dtype, copy=True)
    j -= j.mean(axis=0)
    k = bundle.mixed if bundle.mixed.dtype == dtype else bundle.mixed.astype(dtype)
    v = potential_values(spec, bundle.positions)
    w = v + (spec.beta / z.value) * bundle.psi**2 + 0.5 * np.sum(bundle.drift**2, axis=1)
    return GramContext(J=j, K=k, F=bundle.drift.astype(dtype), W=w.astype(dtype))


def gram_matvec(ctx: GramContext, v: np.ndarray, chunk_size: int | None = None) -> np.ndarray:
    """G v through batched contractions; accepts (P,) or (P, k).

    Never materializes a P x P array. With chunking, per-chunk partial
    results are accumulated in a fixed order.
    """
    single = v.ndim == 1
    vc = np.asarray(v, dtype=ctx.J.dtype)
    if single:
        vc = vc[:, None]
    n = ctx.n_samples
    d = ctx.dim
    out = np.zeros((ctx.n_params, vc.shape[1]), dtype=np.float64)
    step = n if not chunk_size else max(int(chunk_size), 1)
    for start in range(0, n, step):
        sl = slice(start, min(start + step, n))
        j = ctx.J[sl]
        jv = j @ vc  # (n_c, k)
        a = ctx.W[sl, None] * jv
        b = np.zeros((ctx.n_params, vc.shape[1]), dtype=ctx.J.dtype)
        for jdim in range(d):
            kd = ctx.K[jdim][sl]
            kv = kd @ vc
            f = ctx.F[sl, jdim : jdim + 1]
            a += 0.5 * (f * kv)
            b += kd.T @ (0.5 * (f * jv) + 0.5 * kv)
        out += (j.T @ a).astype(np.float64)
        out += b.astype(np.float64)
    out /= n
    return out[:, 0] if single else out


def gram_diag_mean(ctx: GramContext) -> float:
    """tr(G)/P without forming G; the operator's diagonal scale."""
    n = ctx.n_samples
    j = ctx.J
    w = ctx.W
    total = float(np.sum(w * np.einsum("np,np->n", j, j)))
    for jdim in range(ctx.dim):
        kd = ctx.K[jdim]
        f = ctx.F[:, jdim]
        total += float(np.sum(f * np.einsum("np,np->n", j, kd)))
        total += 0.5 * float(np.sum(kd * kd))
    return total / (n * ctx.n_params)


def assemble_dense_gram(ctx: GramContext, guard: int = DENSE_GUARD) -> np.ndarray:
    """Dense Monte Carlo Gram estimate; test/diagnostic path only."""
    p = ctx.n_params
    if p > guard:
        raise SizeGuard(f"P={p} exceeds dense guard {guard}")
    n = ctx.n_samples
    j = ctx.J.astype(np.float64)
    w = ctx.W.astype(np.float64)
    g = j.T @ (w[:, None] * j)
    for jdim in range(ctx.dim):
        kd = ctx.K[jdim].astype(np.float64)
        f = ctx.F[:, jdim : jdim + 1].astype(np.float64)
        cross = kd.T @ (f * j)
        g += 0.5 * (cross + cross.T)
        g += 0.5 * (kd.T @ kd)
    g /= n
    return 0.5 * (g + g.T)


@dataclass
class NystromPreconditioner:
    """Low-rank basis M with MM^T ~ G, applied via the Woodbury identity."""

    M: np.ndarray  # (P, r)
    rank: int
    eps: float
    _lambda: float | None = None
    _chol: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.M.shape[0]

    def _factorize(self, lam: float):
        r = self.M.shape[1]
        c = self.M.T @ self.M + lam * np.eye(r)
        self._chol = np.linalg.cholesky(c)
        self._lambda = lam


def nystrom_build(matvec, p: int, rank: int, eps: float, seed: int) -> NystromPreconditioner:
    """Randomized Nystrom basis M = Y (Omega^T Y + eps I)^(-1/2).

    matvec must accept a (P, r) block. Eigenvalues of the core matrix are
    clamped at eps; if nothing exceeds eps the operator is numerically
    zero and RankDeficient is raised.
    """
    if not 1 <= rank <= p:
        raise ValueError("rank must be in [1, P]")
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal((p, rank))
    y = matvec(omega)
    core = omega.T @ y
    core = 0.5 * (core + core.T) + eps * np.eye(rank)
    evals, evecs = np.linalg.eigh(core)
    if np.all(evals <= eps):
        raise RankDeficient(f"all sketch eigenvalues <= eps={eps:g}")
    evals = np.maximum(evals, eps)
    inv_sqrt = evecs @ ((1.0 / np.sqrt(evals))[:, None] * evecs.T)
    m = y @ inv_sqrt
    return NystromPreconditioner(M=m, rank=rank, eps=eps)


def precond_apply(pc: NystromPreconditioner | None, lam: float, v: np.ndarray) -> np.ndarray:
    """(M M^T + lambda I)^(-1) v in closed form, O(P r) per apply."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if pc is None or pc.M.size == 0:
        return v / lam
    if pc._lambda != lam or pc._chol is None:
        pc._factorize(lam)
    mtv = pc.M.T @ v
    y = np.linalg.solve(pc._chol, mtv)
    y = np.linalg.solve(pc._chol.T, y)
    return (v - pc.M @ y) / lam


@dataclass
class BlockJacobiPreconditioner:
    """Per-layer dense inverse blocks of (G + lambda I); ablation path."""

    slices: list
    chols: list

    @classmethod
    def build(cls, ctx: GramContext, slices, lam: float) -> "BlockJacobiPreconditioner":
        chols = []
        for sl in slices:
            j = ctx.J[:, sl].astype(np.float64)
            w = ctx.W.astype(np.float64)
            g = j.T @ (w[:, None] * j)
            for jdim in range(ctx.dim):
                kd = ctx.K[jdim][:, sl].astype(np.float64)
                f = ctx.F[:, jdim : jdim + 1].astype(np.float64)
                cross = kd.T @ (f * j)
                g += 0.5 * (cross + cross.T)
                g += 0.5 * (kd.T @ kd)
            g /= ctx.n_samples
            g[np.diag_indices_from(g)] += lam
            chols.append(np.linalg.cholesky(0.5 * (g + g.T) + 1e-14 * np.eye(g.shape[0])))
        return cls(slices=list(slices), chols=chols)

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        for sl, chol in zip(self.slices, self.chols):
            y = np.linalg.solve(chol, v[sl])
            out[sl] = np.linalg.solve(chol.T, y)
        return out


def pcg_solve(
    matvec,
    pc,
    b: np.ndarray,
    lam: float,
    tol: float = 1e-4,
    maxit: int = 250,
    x0: np.ndarray | None = None,
):
    """PCG on (G + lambda I) x = b.

    pc may be a NystromPreconditioner, an object with .apply, or None.
    Returns (x, iterations, achieved relative residual). Breakdown is
    raised on non-positive curvature, which signals a non-PSD operator
    upstream.
    """
    if lam <= 0 or tol <= 0:
        raise ValueError("lambda and tol must be positive")

    def apply_a(v):
        return matvec(v) + lam * v

    def apply_m(v):
        if pc is None:
            return v.copy()
        if isinstance(pc, NystromPreconditioner):
            return precond_apply(pc, lam, v)
        return pc.apply(v)

    b = np.asarray(b, dtype=np.float64)
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b), 0, 0.0

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = x0.astype(np.float64, copy=True)
        r = b - apply_a(x)
    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    rel = np.linalg.norm(r) / norm_b
    it = 0
    while rel > tol and it < maxit:
        ap = apply_a(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise Breakdown(f"p^T A p = {pap:.3e} <= 0 at iteration {it}")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rel = np.linalg.norm(r) / norm_b
        if rel <= tol:
            it += 1
            break
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x, it, float(rel)
