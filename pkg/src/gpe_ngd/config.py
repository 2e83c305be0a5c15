"""Experiment configuration: JSON schema, validation, resolution.

A config file names the problem, the network, and every solver knob. All
defaults are materialized into the resolved copy that runs persist, so an
output directory is reproducible from its resolved_config.json alone. The
config hash (sha256 of the canonical resolved document minus run-local
paths) stamps every output file.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .estimators import (
    PotentialSpec,
    harmonic,
    lattice2d_a,
    lattice2d_b,
    lattice3d,
    random_quad_form,
)
from .network import Architecture
from .optimizer import OptimizerConfig
from .sampler import DomainBox

_PROBLEM_DIMS = {"lattice2d_a": 2, "lattice2d_b": 2, "lattice3d": 3}

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "threads": None,
    "problem": {
        "kind": "harmonic",
        "beta": 0.0,
        "dim": None,  # required for harmonic / quad_form
        "box_half_width": 8.0,
        "matrix_seed": 0,
    },
    "architecture": {
        "n_fourier": 0,
        "fourier_scale": 1.0,
        "hidden_layers": 5,
        "hidden_width": 50,
    },
    "sampler": {
        "kind": "mh",
        "n_walkers": 4000,
        "burn_in_steps": 200,
        "steps_per_epoch": 5,
        "init_scale": 1.0,
        "step_size": 0.5,
        "n_leapfrog": 5,
    },
    "normalization": {
        "alpha": 0.8,
        "n_samples": 8000,
        "ema": 0.5,
        "method": "adis",
        "grid_n": 100,
    },
    "optimizer": {
        "mode": "ngd",
        "epochs": 100,
        "nystrom_rank": 128,
        "refresh_period": 10,
        "nystrom_eps": 1e-8,
        "pcg_tol": 1e-4,
        "pcg_maxit": 250,
        "adam_lr": 1e-3,
        "gram_dtype": "f64",
        "eval_chunk": 1024,
        "checkpoint_every": 0,
        "residual_tol": 0.0,
        "lm_damping": True,
        "lm_scale0": 100.0,
        "trust_energy": 1.0,
        "max_step_norm": 5.0,
        "gauge_fix": True,
        "grad_clip_mad": 0.0,
        "snr_step_control": True,
        "preconditioner": "nystrom",
    },
    "reference": {
        "n": 257,
        "tol": 1e-8,
        "maxit": 5000,
    },
}


def _merge_section(name, defaults, user):
    if not isinstance(user, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"section '{name}': unknown keys {sorted(unknown)}")
    out = dict(defaults)
    out.update(user)
    return out


def resolve_config(raw: dict) -> dict:
    """Validate a raw config dict and materialize every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    out = {
        "seed": raw.get("seed", DEFAULTS["seed"]),
        "output_dir": raw.get("output_dir", DEFAULTS["output_dir"]),
        "threads": raw.get("threads", DEFAULTS["threads"]),
    }
    for section in ("problem", "architecture", "sampler", "normalization", "optimizer", "reference"):
        out[section] = _merge_section(section, DEFAULTS[section], raw.get(section, {}))

    if not isinstance(out["seed"], int):
        raise ConfigError("seed must be an integer")

    prob = out["problem"]
    if prob["kind"] not in ("harmonic", "lattice2d_a", "lattice2d_b", "lattice3d", "quad_form"):
        raise ConfigError(f"problem.kind {prob['kind']!r} not recognized")
    if not isinstance(prob["beta"], (int, float)) or prob["beta"] < 0:
        raise ConfigError("problem.beta must be a number >= 0")
    if prob["kind"] in _PROBLEM_DIMS:
        implied = _PROBLEM_DIMS[prob["kind"]]
        if prob["dim"] not in (None, implied):
            raise ConfigError(f"problem.dim must be {implied} for {prob['kind']}")
        prob["dim"] = implied
    elif prob["dim"] is None:
        raise ConfigError(f"problem.dim is required for kind {prob['kind']!r}")
    elif not isinstance(prob["dim"], int) or prob["dim"] < 1:
        raise ConfigError("problem.dim must be a positive integer")
    if prob["box_half_width"] <= 0:
        raise ConfigError("problem.box_half_width must be positive")

    arch = out["architecture"]
    for key in ("n_fourier", "hidden_layers", "hidden_width"):
        if not isinstance(arch[key], int) or arch[key] < 0:
            raise ConfigError(f"architecture.{key} must be a nonnegative integer")
    if arch["hidden_layers"] < 1 or arch["hidden_width"] < 1:
        raise ConfigError("architecture needs at least one hidden layer and unit")

    smp = out["sampler"]
    if smp["kind"] not in ("mh", "hmc"):
        raise ConfigError("sampler.kind must be 'mh' or 'hmc'")
    if smp["n_walkers"] < 1:
        raise ConfigError("sampler.n_walkers must be >= 1")

    norm = out["normalization"]
    if not 0.0 <= norm["alpha"] <= 1.0:
        raise ConfigError("normalization.alpha must be in [0, 1]")
    if norm["n_samples"] < 2:
        raise ConfigError("normalization.n_samples must be >= 2")
    if norm["method"] not in ("adis", "grid"):
        raise ConfigError("normalization.method must be 'adis' or 'grid'")
    if norm["method"] == "grid" and prob["dim"] > 3:
        raise ConfigError("grid normalization is only sensible for dim <= 3")

    opt = out["optimizer"]
    if opt["mode"] not in ("ngd", "adam"):
        raise ConfigError("optimizer.mode must be 'ngd' or 'adam'")
    if opt["epochs"] < 0:
        raise ConfigError("optimizer.epochs must be >= 0")
    if opt["gram_dtype"] not in ("f64", "f32"):
        raise ConfigError("optimizer.gram_dtype must be 'f64' or 'f32'")
    if opt["preconditioner"] not in ("nystrom", "block_jacobi", "none"):
        raise ConfigError("optimizer.preconditioner not recognized")

    ref = out["reference"]
    if ref["n"] < 16:
        raise ConfigError("reference.n must be >= 16")
    return out


def config_hash(resolved: dict) -> str:
    doc = {k: v for k, v in resolved.items() if k not in ("output_dir", "threads")}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return resolve_config(raw)


def preset_path(name: str) -> Path:
    base = resources.files("gpe_ngd") / "presets" / f"{name}.json"
    return Path(str(base))


def load_preset_or_path(name_or_path) -> dict:
    p = Path(name_or_path)
    if p.exists():
        return load_config(p)
    candidate = preset_path(str(name_or_path))
    if candidate.exists():
        return load_config(candidate)
    raise ConfigError(f"no such config file or preset: {name_or_path}")


def build_problem(resolved: dict) -> tuple[PotentialSpec, DomainBox]:
    prob = resolved["problem"]
    kind, beta, dim = prob["kind"], float(prob["beta"]), prob["dim"]
    if kind == "harmonic":
        spec = harmonic(dim, beta=beta)
    elif kind == "lattice2d_a":
        spec = lattice2d_a(beta=beta)
    elif kind == "lattice2d_b":
        spec = lattice2d_b(beta=beta)
    elif kind == "lattice3d":
        spec = lattice3d(beta=beta)
    else:
        spec = random_quad_form(dim, beta=beta, seed=int(prob["matrix_seed"]))
    box = DomainBox.cube(float(prob["box_half_width"]), spec.dim)
    return spec, box


def build_architecture(resolved: dict) -> Architecture:
    arch = resolved["architecture"]
    return Architecture(
        input_dim=resolved["problem"]["dim"],
        n_fourier=arch["n_fourier"],
        fourier_scale=float(arch["fourier_scale"]),
        hidden_layers=arch["hidden_layers"],
        hidden_width=arch["hidden_width"],
    )


def build_optimizer_config(resolved: dict) -> OptimizerConfig:
    smp, norm, opt = resolved["sampler"], resolved["normalization"], resolved["optimizer"]
    return OptimizerConfig(
        mode=opt["mode"],
        epochs=opt["epochs"],
        n_walkers=smp["n_walkers"],
        n_z_samples=norm["n_samples"],
        nystrom_rank=opt["nystrom_rank"],
        refresh_period=opt["refresh_period"],
        nystrom_eps=float(opt["nystrom_eps"]),
        pcg_tol=float(opt["pcg_tol"]),
        pcg_maxit=opt["pcg_maxit"],
        adam_lr=float(opt["adam_lr"]),
        seed=resolved["seed"],
        sampler_kind=smp["kind"],
        steps_per_epoch=smp["steps_per_epoch"],
        n_leapfrog=smp["n_leapfrog"],
        burn_in_steps=smp["burn_in_steps"],
        init_scale=float(smp["init_scale"]),
        mh_step_size=float(smp["step_size"]),
        adis_alpha=float(norm["alpha"]),
        z_ema=float(norm["ema"]),
        z_method=norm["method"],
        z_grid_n=int(norm["grid_n"]),
        gram_dtype=opt["gram_dtype"],
        eval_chunk=opt["eval_chunk"],
        checkpoint_every=opt["checkpoint_every"],
        residual_tol=float(opt["residual_tol"]),
        lm_damping=bool(opt["lm_damping"]),
        lm_scale0=float(opt["lm_scale0"]),
        trust_energy=float(opt["trust_energy"]),
        max_step_norm=float(opt["max_step_norm"]),
        gauge_fix=bool(opt["gauge_fix"]),
        grad_clip_mad=float(opt["grad_clip_mad"]),
        snr_step_control=bool(opt["snr_step_control"]),
        preconditioner=opt["preconditioner"],
    )
