"""Neural variational Monte Carlo ground-state solver for the
Gross-Pitaevskii equation with a Sobolev-metric natural gradient
optimizer, plus a finite-difference reference solver and benchmarks."""

__version__ = "0.1.0"

from .network import Architecture, Params, EvalBundle, init_params, embed, forward, eval_bundle

__all__ = [
    "Architecture",
    "Params",
    "EvalBundle",
    "init_params",
    "embed",
    "forward",
    "eval_bundle",
    "__version__",
]
