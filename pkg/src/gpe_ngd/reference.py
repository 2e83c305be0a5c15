"""Deterministic finite-difference ground-state solver and error metrics.

The solver discretizes the energy-adaptive projected gradient flow on a
uniform tensor grid with homogeneous Dirichlet boundaries. One flow step
solves A_psi n = psi with A_psi = -(1/2) Lap_h + diag(V + beta psi^2),
projects against the mass constraint through the A_psi-Riesz representer
(which is exactly n), and renormalizes. At unit step this is an
energy-diminishing inverse-iteration-type update; a backtracking halving
guards the monotonicity on coarse grids.

Error metrics evaluate the network on the same grid and compare energy,
chemical potential, and density in the same discrete norms, so a
self-comparison is exactly zero.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DimensionMismatch, NoConvergence
from .estimators import PotentialSpec, potential_values
from .network import Params, forward_batch
from .normalization import ZEstimate

GRID_MAGIC = "GPE-GRID v1"


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid over a box; points-per-axis includes boundary."""

    lower: np.ndarray
    upper: np.ndarray
    n: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if len(n) == 1 and lo.size > 1:
            n = n * lo.size
        if lo.size != hi.size or lo.size != len(n):
            raise ValueError("grid dims inconsistent")
        if any(v < 16 for v in n):
            raise ValueError("need at least 16 points per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "n", n)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.n) - 1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def interior_axes(self):
        return [
            np.linspace(self.lower[i], self.upper[i], self.n[i])[1:-1] for i in range(self.dim)
        ]

    def interior_points(self) -> np.ndarray:
        axes = self.interior_axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def full_axes(self):
        return [np.linspace(self.lower[i], self.upper[i], self.n[i]) for i in range(self.dim)]

    def full_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.full_axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interior_shape(self) -> tuple:
        return tuple(v - 2 for v in self.n)


def _laplacian_1d(m: int, h: float) -> sp.csr_matrix:
    main = np.full(m, -2.0 / h**2)
    off = np.full(m - 1, 1.0 / h**2)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def grid_laplacian(grid: Grid) -> sp.csr_matrix:
    """Second-order FD Laplacian on interior nodes, Dirichlet boundaries."""
    hs = grid.spacing
    mats = [_laplacian_1d(grid.n[i] - 2, hs[i]) for i in range(grid.dim)]
    if grid.dim == 1:
        return mats[0]
    eyes = [sp.identity(grid.n[i] - 2, format="csr") for i in range(grid.dim)]
    lap = None
    for i in range(grid.dim):
        factors = [mats[i] if j == i else eyes[j] for j in range(grid.dim)]
        term = factors[0]
        for f in factors[1:]:
            term = sp.kron(term, f, format="csr")
        lap = term if lap is None else lap + term
    return lap.tocsr()


@dataclass
class ReferenceSolution:
    grid: Grid
    psi_ref: np.ndarray  # interior values, unit discrete L2 norm
    e_ref: float
    mu_ref: float
    final_residual: float
    iterations: int
    converged: bool
    spec_kind: str
    beta: float
    energy_history: list | None = None

    def density(self) -> np.ndarray:
        return self.psi_ref**2


def _discrete_energy(psi, lap, v, beta, w):
    kinetic = 0.5 * w * float(psi @ (-(lap @ psi)))
    rest = w * float(np.sum(v * psi**2 + 0.5 * beta * psi**4))
    return kinetic + rest


def solve_reference(
    spec: PotentialSpec,
    grid: Grid,
    tol: float = 1e-8,
    maxit: int = 5000,
    psi0: np.ndarray | None = None,
    inner_tol: float = 1e-10,
    allow_3d: bool = False,
) -> ReferenceSolution:
    """Run the discrete projected flow to the requested residual.

    Raises NoConvergence (carrying the best iterate) past maxit. 3D grids
    are supported only behind allow_3d and modest sizes.
    """
    if grid.dim > 2 and not allow_3d:
        raise DimensionMismatch("reference solver is limited to d <= 2 (pass allow_3d for 3D)")
    if grid.dim > 3:
        raise DimensionMismatch("reference solver supports d <= 3")
    if spec.dim != grid.dim:
        raise DimensionMismatch("potential and grid dimensions differ")

    pts = grid.interior_points()
    v = potential_values(spec, pts)
    lap = grid_laplacian(grid)
    w = grid.cell_volume
    beta = spec.beta

    if psi0 is None:
        psi = np.exp(-0.5 * np.sum(pts**2, axis=1))
    else:
        psi = np.asarray(psi0, dtype=np.float64).copy()
    psi /= np.sqrt(w * float(psi @ psi))

    kin = -0.5 * lap

    def hamiltonian(p):
        return kin @ p + (v + beta * p**2) * p

    def residual_of(p):
        hp = hamiltonian(p)
        mu = w * float(p @ hp)
        r = hp - mu * p
        return float(np.sqrt(w * float(r @ r))), mu

    energy = _discrete_energy(psi, lap, v, beta, w)
    res, mu = residual_of(psi)
    n_sol = psi.copy()
    history = [energy]
    it = 0
    while res > tol and it < maxit:
        a_diag = v + beta * psi**2
        a_op = kin + sp.diags(a_diag)
        m_inv = 1.0 / (a_op.diagonal())
        precond = LinearOperator(a_op.shape, matvec=lambda x: m_inv * x)
        n_sol, info = cg(a_op, psi, x0=n_sol, rtol=inner_tol, atol=0.0, M=precond, maxiter=20000)
        if info != 0:
            raise NoConvergence(f"inner CG failed (info={info}) at flow iteration {it}")
        ipn = w * float(psi @ n_sol)
        grad = psi - n_sol / ipn
        tau = 1.0
        for _ in range(40):
            cand = psi - tau * grad
            cand = cand / np.sqrt(w * float(cand @ cand))
            e_new = _discrete_energy(cand, lap, v, beta, w)
            if e_new <= energy + 1e-13 * max(abs(energy), 1.0):
                break
            tau *= 0.5
        psi = cand
        energy = e_new
        history.append(energy)
        res, mu = residual_of(psi)
        it += 1

    if psi.sum() < 0:
        psi = -psi  # ground state fixed to the positive sign
    sol = ReferenceSolution(
        grid=grid,
        psi_ref=psi,
        e_ref=energy,
        mu_ref=mu,
        final_residual=res,
        iterations=it,
        converged=res <= tol,
        spec_kind=spec.kind,
        beta=beta,
        energy_history=history,
    )
    if not sol.converged:
        raise NoConvergence(f"residual {res:.3e} > tol {tol:g} after {maxit} iterations", result=sol)
    return sol


def _prolong(coarse: ReferenceSolution, fine_grid: Grid) -> np.ndarray:
    """Interpolate a coarse solution onto a finer grid's interior."""
    full_shape = coarse.grid.n
    field = np.zeros(full_shape)
    inner = tuple(slice(1, -1) for _ in range(coarse.grid.dim))
    field[inner] = coarse.psi_ref.reshape(coarse.grid.interior_shape())
    interp = RegularGridInterpolator(coarse.grid.full_axes(), field, method="linear")
    return interp(fine_grid.interior_points())


def solve_reference_continuation(
    spec: PotentialSpec,
    grid: Grid,
    tol: float = 1e-8,
    maxit: int = 5000,
    coarse_start: int = 65,
    allow_3d: bool = False,
) -> ReferenceSolution:
    """Coarse-to-fine mesh continuation wrapper around solve_reference."""
    ladder = []
    n_target = min(grid.n)
    n_val = coarse_start
    while n_val < n_target:
        ladder.append(n_val)
        n_val = 2 * (n_val - 1) + 1
    psi0 = None
    for n_coarse in ladder:
        sub = Grid(grid.lower, grid.upper, (n_coarse,) * grid.dim)
        try:
            sol = solve_reference(
                spec, sub, tol=max(tol, 1e-7), maxit=maxit, psi0=psi0, allow_3d=allow_3d
            )
        except NoConvergence as exc:
            sol = exc.result
        psi0 = _prolong(sol, grid) if n_coarse == ladder[-1] else _prolong(sol, Grid(grid.lower, grid.upper, (2 * (n_coarse - 1) + 1,) * grid.dim))
    return solve_reference(spec, grid, tol=tol, maxit=maxit, psi0=psi0, allow_3d=allow_3d)


def _spec_cache_key(spec: PotentialSpec, grid: Grid, tol: float) -> str | None:
    if spec.kind == "custom":
        return None
    payload = {
        "kind": spec.kind,
        "beta": spec.beta,
        "dim": spec.dim,
        "matrix": None if spec.matrix is None else spec.matrix.tolist(),
        "lower": grid.lower.tolist(),
        "upper": grid.upper.tolist(),
        "n": list(grid.n),
        "tol": tol,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def solve_reference_cached(
    spec: PotentialSpec,
    grid: Grid,
    tol: float = 1e-8,
    maxit: int = 5000,
    cache_dir=None,
    allow_3d: bool = False,
) -> ReferenceSolution:
    """Disk-cached continuation solve, keyed by (spec, grid, tol)."""
    key = _spec_cache_key(spec, grid, tol) if cache_dir is not None else None
    if key is not None:
        path = Path(cache_dir) / f"ref_{key}.npz"
        if path.exists():
            data = np.load(path)
            return ReferenceSolution(
                grid=grid,
                psi_ref=data["psi"],
                e_ref=float(data["e"]),
                mu_ref=float(data["mu"]),
                final_residual=float(data["res"]),
                iterations=int(data["iters"]),
                converged=bool(data["converged"]),
                spec_kind=spec.kind,
                beta=spec.beta,
            )
    sol = solve_reference_continuation(spec, grid, tol=tol, maxit=maxit, allow_3d=allow_3d)
    if key is not None:
        path = Path(cache_dir) / f"ref_{key}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            path,
            psi=sol.psi_ref,
            e=sol.e_ref,
            mu=sol.mu_ref,
            res=sol.final_residual,
            iters=sol.iterations,
            converged=sol.converged,
        )
    return sol


def network_field_on_grid(params: Params, z: ZEstimate, grid: Grid) -> np.ndarray:
    """psi_theta / sqrt(Z) evaluated at the interior nodes."""
    pts = grid.interior_points()
    vals = np.empty(len(pts))
    step = 65536
    for start in range(0, len(pts), step):
        vals[start : start + step] = forward_batch(params, pts[start : start + step])
    return vals / np.sqrt(z.value)


def error_metrics_fields(psi_nn: np.ndarray, spec: PotentialSpec, ref: ReferenceSolution):
    """(eps_E, eps_mu, eps_rho) of a gridded field against the reference.

    Both energies use the same discrete functional, so systematic FD bias
    cancels and a self-comparison returns exactly zero.
    """
    grid = ref.grid
    lap = grid_laplacian(grid)
    v = potential_values(spec, grid.interior_points())
    w = grid.cell_volume
    e_nn = _discrete_energy(psi_nn, lap, v, spec.beta, w)
    mu_nn = e_nn + 0.5 * spec.beta * w * float(np.sum(psi_nn**4))
    rho_nn = psi_nn**2
    rho_ref = ref.density()
    eps_e = abs(e_nn - ref.e_ref) / abs(ref.e_ref)
    eps_mu = abs(mu_nn - ref.mu_ref) / abs(ref.mu_ref)
    eps_rho = float(np.linalg.norm(rho_nn - rho_ref) / np.linalg.norm(rho_ref))
    return eps_e, eps_mu, eps_rho


def error_metrics(params: Params, z: ZEstimate, ref: ReferenceSolution, spec: PotentialSpec):
    """Evaluate the normalized network on the reference grid and compare."""
    psi_nn = network_field_on_grid(params, z, ref.grid)
    return error_metrics_fields(psi_nn, spec, ref)


def export_grid(params: Params, z: ZEstimate, grid: Grid, path, beta: float = 0.0) -> None:
    """Write the warm-start file: text header then f64 values row-major.

    Values cover the full tensor grid (boundary included) and are
    renormalized to exactly unit trapezoid L2 norm. Top-level header
    fields are separated by "; "; the box value packs lo,hi pairs with
    bare semicolons.
    """
    pts = grid.full_points()
    vals = np.empty(len(pts))
    step = 65536
    for start in range(0, len(pts), step):
        vals[start : start + step] = forward_batch(params, pts[start : start + step])
    vals /= np.sqrt(z.value)

    wts = 1.0
    for i in range(grid.dim):
        w1 = np.ones(grid.n[i])
        w1[0] = w1[-1] = 0.5
        shape = [1] * grid.dim
        shape[i] = grid.n[i]
        wts = wts * w1.reshape(shape)
    wts = (wts * grid.cell_volume).ravel()
    norm = np.sqrt(float(np.sum(wts * vals**2)))
    vals = vals / norm

    n_str = ",".join(str(v) for v in grid.n)
    box_str = ";".join(f"{lo!r},{hi!r}" for lo, hi in zip(grid.lower, grid.upper))
    header = f"{GRID_MAGIC}; d={grid.dim}; n={n_str}; box={box_str}; beta={beta!r}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vals.astype("<f8").tobytes())


def read_grid_export(path):
    """Round-trip reader for the warm-start format."""
    raw = Path(path).read_bytes()
    head, _, rest = raw.partition(b"\n")
    text = head.decode("ascii")
    if not text.startswith(GRID_MAGIC):
        raise ValueError(f"{path}: not a grid export")
    fields = dict(part.split("=", 1) for part in text.split("; ")[1:])
    d = int(fields["d"])
    n = tuple(int(v) for v in fields["n"].split(","))
    vals = np.frombuffer(rest, dtype="<f8").copy()
    meta = {"d": d, "n": n, "beta": float(fields["beta"]), "box": fields["box"]}
    return meta, vals.reshape(n)
