"""Shared fixtures and finite-difference helpers for the test suite."""

import numpy as np
import pytest

from gpe_ngd.network import Architecture, init_params, forward_batch, log_abs

# The matrix every derivative validation runs over: dimensions, embedding
# on/off, shallow and deep nets. Width kept small so theta-space FD stays
# cheap. fourier_scale moderate so FD truncation stays below tolerance.
ARCH_MATRIX = [
    Architecture(input_dim=d, n_fourier=m, fourier_scale=0.5, hidden_layers=lh, hidden_width=4)
    for d in (1, 2, 3)
    for m in (0, 8)
    for lh in (2, 5)
]


def randomized_params(arch, seed, jitter=0.3):
    """init_params plus a noise kick so biases are nonzero too."""
    params = init_params(arch, seed)
    rng = np.random.default_rng(seed + 10_000)
    return params.with_theta(params.theta + jitter * rng.standard_normal(params.n_params))


def fd_score(params, R, h=1e-5):
    """Central finite differences of ln|psi| in theta."""
    n, p = R.shape[0], params.n_params
    out = np.empty((n, p))
    for k in range(p):
        tp = params.theta.copy()
        tp[k] += h
        tm = params.theta.copy()
        tm[k] -= h
        out[:, k] = (log_abs(params.with_theta(tp), R) - log_abs(params.with_theta(tm), R)) / (2 * h)
    return out


def fd_drift(params, R, h=1e-5):
    """Central finite differences of ln|psi| in r."""
    n, d = R.shape
    out = np.empty((n, d))
    for j in range(d):
        rp = R.copy()
        rp[:, j] += h
        rm = R.copy()
        rm[:, j] -= h
        out[:, j] = (log_abs(params, rp) - log_abs(params, rm)) / (2 * h)
    return out


def fd_lap_ratio(params, R, h=3e-4):
    """Richardson-extrapolated second differences of psi in r, over psi."""
    psi0 = forward_batch(params, R)

    def second_diff(hh):
        acc = np.zeros(R.shape[0])
        for j in range(R.shape[1]):
            rp = R.copy()
            rp[:, j] += hh
            rm = R.copy()
            rm[:, j] -= hh
            acc += (forward_batch(params, rp) - 2 * psi0 + forward_batch(params, rm)) / hh**2
        return acc

    return (4.0 * second_diff(h / 2) - second_diff(h)) / 3.0 / psi0


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fit_network_to(params, xs, weights, target, iters=800, lr=0.05):
    """Quadrature-MSE fit of the net to target values on a 1D grid.

    Plain Adam on 2*sum(w*(psi-t)*psi*O); used to manufacture test nets
    that decay at the box boundary (the gradient identities assume
    negligible boundary flux, as the confining potential guarantees in
    production).
    """
    from gpe_ngd.network import eval_bundle, forward_batch

    R = xs[:, None]
    theta = params.theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, iters + 1):
        p = params.with_theta(theta)
        b = eval_bundle(p, R, need_mixed=False)
        g = 2.0 * (b.score.T @ (weights * (b.psi - target) * b.psi))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9**t)
        vh = v / (1 - 0.999**t)
        theta = theta - lr * mh / (np.sqrt(vh) + 1e-8)
    return params.with_theta(theta)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
