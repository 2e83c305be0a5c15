"""Training loop: sampling, normalization, gradient, preconditioned
natural-gradient solve, parameter update, adaptive step and damping.

One NGD epoch: refresh the walkers, update the defensive proposal from
their moments and re-estimate Z, evaluate the derivative bundle, form the
gradient, lazily rebuild the Nystrom preconditioner, solve
(G + lambda I) dtheta = -g matrix-free, and step theta by tau dtheta.
The step size and damping follow the residual schedules

    tau = 0.5 + 0.5 res / (1 + res),      lambda = min(1e-3, 1e-3 res)

with lambda floored at 1e-12. An Adam baseline shares the sampling and
gradient pipeline for comparison runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateCovariance, InsufficientCoverage, NodeCrossing, RankDeficient
from .estimators import PotentialSpec, compute_local_stats, grad_loss, residual, virial_ratio
from .metric import (
    BlockJacobiPreconditioner,
    build_gram_context,
    gram_diag_mean,
    gram_matvec,
    nystrom_build,
    pcg_solve,
)
from .network import Architecture, Params, eval_bundle, init_params, save_params
from .normalization import (
    AdisProposal,
    ZEstimate,
    estimate_z,
    estimate_z_grid,
    make_initial_proposal,
    update_proposal,
)
from .sampler import DomainBox, WalkerEnsemble, ensemble_moments, hmc_sweep, init_ensemble, mh_sweep

LAMBDA_CAP = 1e-3
LAMBDA_FLOOR = 1e-12
LM_BOUNDS = (1e-12, 1e-1)


def step_size(res: float) -> float:
    """tau = 0.5 + 0.5 res/(1+res), increasing from 0.5 toward 1."""
    if res < 0:
        raise ValueError("residual must be >= 0")
    return 0.5 + 0.5 * res / (1.0 + res)


def damping(res: float) -> float:
    """lambda = min(1e-3, 1e-3 res), floored to keep G + lambda I invertible."""
    if res < 0:
        raise ValueError("residual must be >= 0")
    return max(min(LAMBDA_CAP, LAMBDA_CAP * res), LAMBDA_FLOOR)


def adam_update(theta, g, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One step of the standard adaptive-moment rule; returns (theta, m, v)."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class OptimizerConfig:
    mode: str = "ngd"  # "ngd" | "adam"
    epochs: int = 100
    n_walkers: int = 4000
    n_z_samples: int = 8000
    nystrom_rank: int = 128
    refresh_period: int = 10
    nystrom_eps: float = 1e-8
    pcg_tol: float = 1e-4
    pcg_maxit: int = 250
    adam_lr: float = 1e-3
    seed: int = 0
    sampler_kind: str = "mh"  # "mh" | "hmc"
    steps_per_epoch: int = 5
    n_leapfrog: int = 5
    burn_in_steps: int = 200
    init_scale: float = 1.0
    mh_step_size: float = 0.5
    adis_alpha: float = 0.8
    z_ema: float = 0.5
    # "adis" draws from the defensive mixture; "grid" integrates |psi|^2
    # on a tensor grid (deterministic, d <= 3 only; the 2D experiments
    # normalize this way, ADIS is the high-dimensional route).
    z_method: str = "adis"
    z_grid_n: int = 100
    gram_dtype: str = "f64"  # "f64" | "f32"
    eval_chunk: int = 1024
    checkpoint_every: int = 0
    residual_tol: float = 0.0
    # LM-style overlay on the residual damping schedule: starts high and
    # relaxes 0.75x per energy decrease, tightens 4x per increase. Without
    # it the damping floor amplifies sampling noise along the near-null
    # Gram directions of a fresh network and training diverges.
    lm_damping: bool = True
    lm_scale0: float = 100.0
    lm_up: float = 4.0
    lm_down: float = 0.85
    lm_floor: float = 1.0
    preconditioner: str = "nystrom"  # "nystrom" | "block_jacobi" | "none"
    final_z_factor: int = 4
    # Two-sided trust cap on the NGD step, both inactive near convergence
    # and 0 disables either. trust_energy bounds the quadratic form
    # -g.delta ~ delta (G+lambda I) delta (the energy-metric step length,
    # transferable across problems); max_step_norm is a Euclidean backstop
    # against noise in metric-null directions that the quadratic cap
    # cannot see.
    trust_energy: float = 1.0
    max_step_norm: float = 5.0
    # Rescale the output layer by 1/sqrt(Z) after each update. The scale
    # direction is exactly null in the centered-score Gram, so sampling
    # noise otherwise random-walks the raw amplitude; pinning the gauge
    # keeps Z ~ 1 with no effect on the normalized state.
    gauge_fix: bool = True
    # Winsorize local chemical potentials at median +- k MAD inside the
    # gradient weights and schedules. Walkers straying near an incidental
    # node of the trial state produce |E_L| outliers that otherwise kick
    # the parameters; diagnostics keep the raw values. 0 disables.
    grad_clip_mad: float = 0.0
    # Scale each step by sqrt of the gradient's signal fraction, measured
    # as the cosine of half-batch gradients. Steps anneal automatically
    # once the gradient is noise-dominated, lowering the stochastic
    # equilibrium without hand-tuned schedules.
    snr_step_control: bool = True
    # Scale the damping schedule by the mean Gram diagonal, making the
    # 1e-3 cap a shift relative to the operator's scale (the classic
    # stochastic-reconfiguration regularization). An absolute 1e-3 on an
    # operator with O(10..100) diagonal lets sampling noise through.
    relative_damping: bool = True
    # Warm-starting PCG across epochs accumulates Krylov depth and defeats
    # the regularization that a truncated solve provides; off by default.
    pcg_warm_start: bool = False

    def __post_init__(self):
        if self.mode not in ("ngd", "adam"):
            raise ValueError("mode must be 'ngd' or 'adam'")
        if self.sampler_kind not in ("mh", "hmc"):
            raise ValueError("sampler_kind must be 'mh' or 'hmc'")
        if self.epochs < 0 or self.n_walkers < 1 or self.n_z_samples < 2:
            raise ValueError("invalid counts")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if self.preconditioner not in ("nystrom", "block_jacobi", "none"):
            raise ValueError("unknown preconditioner")
        if self.z_method not in ("adis", "grid"):
            raise ValueError("z_method must be 'adis' or 'grid'")

    @property
    def store_dtype(self):
        return np.float32 if self.gram_dtype == "f32" else np.float64


@dataclass
class TrainState:
    params: Params
    ensemble: WalkerEnsemble
    proposal: AdisProposal
    spec: PotentialSpec
    box: DomainBox
    pc: object = None
    pc_age: int = 0
    epoch: int = 0
    tau: float = 1.0
    lam: float = LAMBDA_CAP
    lm_scale: float = 1.0
    energy_ema: float | None = None
    res_ema: float | None = None
    z: ZEstimate | None = None
    prev_energy: float | None = None
    delta_prev: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    history: list = field(default_factory=list)
    rng_z: np.random.Generator = None
    rng_pc: np.random.Generator = None


def _sample_epoch(state: TrainState, cfg: OptimizerConfig) -> WalkerEnsemble:
    ens = state.ensemble
    if cfg.sampler_kind == "hmc":
        for _ in range(cfg.steps_per_epoch):
            ens = hmc_sweep(ens, state.params, cfg.n_leapfrog)
    else:
        ens = mh_sweep(ens, state.params, cfg.steps_per_epoch)
    return ens


def _refresh_z(state: TrainState, cfg: OptimizerConfig):
    """Walker moments -> proposal update -> Z estimate, with fallbacks."""
    if cfg.z_method == "grid":
        z = estimate_z_grid(state.params, state.box, cfg.z_grid_n)
        return state.proposal, z, ""
    proposal = state.proposal
    z_flag = ""
    try:
        moments = ensemble_moments(state.ensemble)
        proposal = update_proposal(proposal, moments, ema=cfg.z_ema)
    except DegenerateCovariance:
        z_flag = "degenerate_moments"
    try:
        z = estimate_z(
            state.params, proposal, cfg.n_z_samples, seed=int(state.rng_z.integers(2**63))
        )
    except InsufficientCoverage:
        if state.z is None:
            raise
        z = state.z
        z_flag = (z_flag + "+" if z_flag else "") + "z_fallback"
    return proposal, z, z_flag


def _epoch_common(state: TrainState, cfg: OptimizerConfig, need_mixed: bool):
    t0 = time.perf_counter()
    state.ensemble = _sample_epoch(state, cfg)
    state.proposal, z, z_flag = _refresh_z(state, cfg)
    state.z = z
    for attempt in range(4):
        try:
            bundle = eval_bundle(
                state.params,
                state.ensemble.positions,
                need_mixed=need_mixed,
                chunk_size=cfg.eval_chunk,
                store_dtype=cfg.store_dtype,
            )
            break
        except NodeCrossing as exc:
            if attempt == 3:
                raise
            # walkers sitting on a node: kick them off and invalidate the
            # cached density so the next sweep recomputes it
            kick = 1e-3 * state.ensemble.step_size
            pos = state.ensemble.positions
            rng = state.ensemble.rng
            pos[exc.indices] += kick * rng.standard_normal((len(exc.indices), pos.shape[1]))
            np.clip(pos, state.box.lower, state.box.upper, out=pos)
            state.ensemble.log_density = None
            z_flag = (z_flag + "+" if z_flag else "") + "node_resample"
    stats = compute_local_stats(bundle, state.spec, z)
    res_raw = residual(stats.mu_local)
    if cfg.grad_clip_mad > 0:
        med = float(np.median(stats.mu_local))
        mad = float(np.median(np.abs(stats.mu_local - med))) + 1e-12
        lo, hi = med - cfg.grad_clip_mad * mad, med + cfg.grad_clip_mad * mad
        mu_robust = np.clip(stats.mu_local, lo, hi)
    else:
        mu_robust = stats.mu_local
    res = residual(mu_robust)  # drives schedules; history keeps the raw value
    robust_stats = replace(stats, mu_local=mu_robust, mu_bar=float(np.mean(mu_robust)))
    g = grad_loss(bundle, robust_stats)

    snr = 1.0
    if cfg.snr_step_control:
        n = bundle.n_samples
        half = n // 2
        wts = mu_robust - float(np.mean(mu_robust))
        ga = bundle.score[:half].T @ wts[:half].astype(bundle.score.dtype)
        gb = bundle.score[half:].T @ wts[half:].astype(bundle.score.dtype)
        na, nb = float(np.linalg.norm(ga)), float(np.linalg.norm(gb))
        if na > 0 and nb > 0:
            snr = float(np.clip(float(ga @ gb) / (na * nb), 0.0, 1.0))
        else:
            snr = 0.0
    row = {
        "epoch": state.epoch,
        "energy": stats.energy,
        "mu_bar": stats.mu_bar,
        "residual": res_raw,
        "residual_robust": res,
        "kinetic": stats.kinetic,
        "potential": stats.potential,
        "interaction": stats.interaction,
        "virial_ratio": virial_ratio(stats, state.box.dim) if stats.potential > 0 else np.nan,
        "z_value": z.value,
        "z_stderr": z.std_error,
        "grad_norm": float(np.linalg.norm(g)),
        "tau": state.tau,
        "lambda": state.lam,
        "acceptance": state.ensemble.acceptance_rate,
        "mcmc_step": state.ensemble.step_size,
        "z_ess": z.ess,
        "flags": z_flag,
    }
    row["grad_snr"] = snr
    return bundle, stats, res, g, row, t0, snr


def ngd_epoch(state: TrainState, cfg: OptimizerConfig) -> TrainState:
    """One iteration of the projected natural-gradient scheme."""
    bundle, stats, res, g, row, t0, snr = _epoch_common(state, cfg, need_mixed=True)
    gnorm = row["grad_norm"]

    pcg_iters, pcg_rel = 0, 0.0
    descent_ok = True
    lam_applied = state.lam
    if gnorm == 0.0:
        delta = np.zeros_like(g)
    else:
        ctx = build_gram_context(bundle, state.spec, state.z, dtype=cfg.store_dtype)
        matvec = lambda v: gram_matvec(ctx, v)
        if cfg.relative_damping:
            lam_applied = state.lam * max(gram_diag_mean(ctx), 1e-30)
        refresh_due = state.pc is None or (state.epoch % cfg.refresh_period == 0)
        if cfg.preconditioner == "none":
            state.pc = None
        elif refresh_due:
            try:
                if cfg.preconditioner == "block_jacobi":
                    state.pc = BlockJacobiPreconditioner.build(
                        ctx, state.params.layer_slices(), lam_applied
                    )
                else:
                    rank = min(cfg.nystrom_rank, state.params.n_params)
                    state.pc = nystrom_build(
                        matvec,
                        state.params.n_params,
                        rank,
                        cfg.nystrom_eps,
                        seed=int(state.rng_pc.integers(2**63)),
                    )
                state.pc_age = 0
            except RankDeficient:
                state.pc = None
                state.pc_age = 0
        x0 = state.delta_prev if cfg.pcg_warm_start and state.delta_prev is not None else None
        delta, pcg_iters, pcg_rel = pcg_solve(
            matvec, state.pc, -g, lam_applied, tol=cfg.pcg_tol, maxit=cfg.pcg_maxit, x0=x0
        )
        if float(g @ delta) >= 0.0:
            # a bad warm start can spoil the descent guarantee; restart cold
            delta, pcg_iters, pcg_rel = pcg_solve(
                matvec, state.pc, -g, lam_applied, tol=cfg.pcg_tol, maxit=cfg.pcg_maxit
            )
        descent_ok = float(g @ delta) < 0.0
        assert descent_ok, "natural-gradient step is not a descent direction"
        state.delta_prev = delta

    step_scale = np.sqrt(snr) if cfg.snr_step_control else 1.0
    if cfg.trust_energy > 0 and gnorm > 0:
        q = float(-(g @ delta))  # = delta (G + lam I) delta at the solve
        if q > cfg.trust_energy:
            step_scale = min(step_scale, float(np.sqrt(cfg.trust_energy / q)))
    if cfg.max_step_norm > 0:
        dn = float(np.linalg.norm(delta))
        if dn * step_scale > cfg.max_step_norm:
            step_scale = cfg.max_step_norm / dn
    theta_new = state.params.theta + state.tau * step_scale * delta
    if cfg.gauge_fix and state.z is not None:
        out_sl = state.params.layer_slices()[-1]
        theta_new = theta_new.copy()
        theta_new[out_sl] /= np.sqrt(state.z.value)
    state.params = state.params.with_theta(theta_new)
    state.ensemble.log_density = None  # cache predates the update
    state.pc_age += 1

    # schedules for the next epoch, from this epoch's residual
    state.tau = step_size(res)
    lam_next = damping(res)
    if cfg.lm_damping:
        # Damping controller on top of the residual schedule. Catastrophic
        # signals (energy above the Monte Carlo band, residual jump) raise
        # the multiplier hard; otherwise it follows the residual TREND:
        # while the smoothed residual falls the multiplier relaxes, and on
        # a plateau it tightens, pushing the noise equilibrium lower. The
        # multiplier never drops below 1, so stable training recovers the
        # plain schedule.
        se = float(np.std(stats.e_local) / np.sqrt(len(stats.e_local)))
        if state.energy_ema is not None and state.res_ema is not None:
            blown_up = stats.energy > state.energy_ema + 2.0 * se or res > 3.0 * state.res_ema
            improving = res < 0.995 * state.res_ema
            if blown_up:
                factor = cfg.lm_up
            elif improving:
                factor = cfg.lm_down
            else:
                factor = 1.0 / cfg.lm_down
            state.lm_scale = float(np.clip(state.lm_scale * factor, cfg.lm_floor, 1e8))
        state.energy_ema = (
            stats.energy
            if state.energy_ema is None
            else 0.7 * state.energy_ema + 0.3 * stats.energy
        )
        state.res_ema = res if state.res_ema is None else 0.8 * state.res_ema + 0.2 * res
        lam_next = float(np.clip(lam_next * state.lm_scale, *LM_BOUNDS))
    state.lam = max(lam_next, LAMBDA_FLOOR)
    state.prev_energy = stats.energy

    row.update(
        {
            "pcg_iters": pcg_iters,
            "pcg_rel_res": pcg_rel,
            "precond_age": state.pc_age,
            "descent_ok": descent_ok,
            "step_scale": step_scale,
            "lambda_applied": lam_applied,
            "wall_ms": 1e3 * (time.perf_counter() - t0),
        }
    )
    state.history.append(row)
    state.epoch += 1
    return state


def adam_epoch(state: TrainState, cfg: OptimizerConfig) -> TrainState:
    """Same sampling and gradient pipeline, first-order update."""
    bundle, stats, res, g, row, t0, snr = _epoch_common(state, cfg, need_mixed=False)
    if state.adam_m is None:
        state.adam_m = np.zeros_like(g)
        state.adam_v = np.zeros_like(g)
    state.adam_t += 1
    theta, state.adam_m, state.adam_v = adam_update(
        state.params.theta, g, state.adam_m, state.adam_v, state.adam_t, lr=cfg.adam_lr
    )
    state.params = state.params.with_theta(theta)
    state.ensemble.log_density = None  # cache predates the update
    state.prev_energy = stats.energy
    row.update(
        {
            "pcg_iters": 0,
            "pcg_rel_res": 0.0,
            "precond_age": 0,
            "descent_ok": True,
            "step_scale": 1.0,
            "wall_ms": 1e3 * (time.perf_counter() - t0),
        }
    )
    state.history.append(row)
    state.epoch += 1
    return state


def init_state(
    arch: Architecture, spec: PotentialSpec, box: DomainBox, cfg: OptimizerConfig
) -> TrainState:
    """Initialize parameters and walkers and run the adaptive burn-in."""
    ss = np.random.SeedSequence(cfg.seed)
    kids = ss.spawn(4)
    params = init_params(arch, seed=int(kids[0].generate_state(1)[0]))
    ens = init_ensemble(
        cfg.n_walkers,
        box,
        init_scale=cfg.init_scale,
        seed=int(kids[1].generate_state(1)[0]),
        step_size=cfg.mh_step_size,
    )
    if cfg.sampler_kind == "hmc":
        ens.step_size = min(cfg.mh_step_size, 0.2)
        for _ in range(max(1, cfg.burn_in_steps // max(cfg.n_leapfrog, 1))):
            ens = hmc_sweep(ens, params, cfg.n_leapfrog)
    else:
        rounds = max(1, cfg.burn_in_steps // 5)
        for _ in range(rounds):
            ens = mh_sweep(ens, params, 5)
    ens = ens.freeze()

    proposal = make_initial_proposal(box, alpha=cfg.adis_alpha, scale=max(cfg.init_scale, 0.5))
    try:
        proposal = update_proposal(proposal, ensemble_moments(ens), ema=1.0)
    except DegenerateCovariance:
        pass

    lm_scale = cfg.lm_scale0 if (cfg.lm_damping and cfg.mode == "ngd") else 1.0
    return TrainState(
        params=params,
        ensemble=ens,
        proposal=proposal,
        spec=spec,
        box=box,
        lam=float(np.clip(LAMBDA_CAP * lm_scale, LAMBDA_FLOOR, LM_BOUNDS[1])),
        lm_scale=lm_scale,
        rng_z=np.random.default_rng(kids[2]),
        rng_pc=np.random.default_rng(kids[3]),
    )


def train(
    arch: Architecture,
    spec: PotentialSpec,
    box: DomainBox,
    cfg: OptimizerConfig,
    output_dir=None,
    epoch_callback=None,
):
    """Run the configured number of epochs; returns (state, history).

    epoch_callback(state) may return True to stop early (used by the
    benchmark harness and convergence monitors). Checkpoints are written
    under output_dir/checkpoints when configured. The final normalized
    wavefunction is psi / sqrt(Z_final) with Z re-estimated at
    final_z_factor times the per-epoch sample count.
    """
    state = init_state(arch, spec, box, cfg)
    step = ngd_epoch if cfg.mode == "ngd" else adam_epoch
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    for _ in range(cfg.epochs):
        state = step(state, cfg)
        if out is not None and cfg.checkpoint_every > 0 and state.epoch % cfg.checkpoint_every == 0:
            save_params(state.params, out / "checkpoints" / f"epoch_{state.epoch:06d}.bin")
        if cfg.residual_tol > 0 and state.history[-1]["residual"] < cfg.residual_tol:
            break
        if epoch_callback is not None and epoch_callback(state):
            break

    if state.epoch > 0:
        if cfg.z_method == "grid":
            state.z = estimate_z_grid(state.params, box, cfg.z_grid_n)
        else:
            try:
                state.z = estimate_z(
                    state.params,
                    state.proposal,
                    cfg.final_z_factor * cfg.n_z_samples,
                    seed=int(state.rng_z.integers(2**63)),
                )
            except InsufficientCoverage:
                pass
    if out is not None:
        save_params(state.params, out / "checkpoints" / "final.bin")
    return state, state.history
