"""Fourier-feature MLP wavefunction with exact analytic derivatives.

The ansatz is a real scalar tanh MLP, optionally fed through a frozen
random Fourier embedding gamma(r) = [cos(2*pi*B r), sin(2*pi*B r)].
Everything the Monte Carlo machinery needs per sample is produced by a
single pass over the batch:

* psi and ln|psi|
* drift F = grad_r ln|psi|
* Laplacian ratio (Delta psi)/psi
* score O = grad_theta ln|psi|
* mixed derivatives grad_r of each score component

Input-space derivatives propagate forward together with the values
(value, Jacobian, Laplacian per layer); parameter-space derivatives come
from a reverse sweep carrying one adjoint channel for psi and one per
spatial component of grad psi. No finite differences anywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NodeCrossing

PARAMS_MAGIC = b"GPE1"


@dataclass(frozen=True)
class Architecture:
    """Network hyperparameters. Activation is fixed to tanh."""

    input_dim: int
    n_fourier: int = 0
    fourier_scale: float = 1.0
    hidden_layers: int = 5
    hidden_width: int = 50

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.n_fourier < 0:
            raise ValueError("n_fourier must be >= 0")
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    @property
    def n_features(self) -> int:
        """Width of the first hidden layer's input."""
        return 2 * self.n_fourier if self.n_fourier > 0 else self.input_dim

    def layer_dims(self) -> list[tuple[int, int]]:
        """(rows, cols) of every weight matrix, hidden layers then output."""
        dims = [(self.hidden_width, self.n_features)]
        for _ in range(self.hidden_layers - 1):
            dims.append((self.hidden_width, self.hidden_width))
        dims.append((1, self.hidden_width))
        return dims


@dataclass
class Params:
    """Flat trainable vector plus shape metadata and the frozen embedding.

    ``shape_table`` lists (rows, cols, offset) for the tensors in theta,
    ordered W1, b1, ..., W_out, b_out (biases recorded with cols=1).
    ``fourier_b`` never appears in theta.
    """

    arch: Architecture
    theta: np.ndarray
    shape_table: tuple[tuple[int, int, int], ...]
    fourier_b: np.ndarray

    @property
    def n_params(self) -> int:
        return self.theta.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into theta, hidden layers first, output last."""
        out = []
        for i in range(0, len(self.shape_table), 2):
            wr, wc, wo = self.shape_table[i]
            br, _, bo = self.shape_table[i + 1]
            w = self.theta[wo : wo + wr * wc].reshape(wr, wc)
            b = self.theta[bo : bo + br]
            out.append((w, b))
        return out

    def with_theta(self, theta: np.ndarray) -> "Params":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ValueError(f"theta must have shape {self.theta.shape}")
        return replace(self, theta=theta)

    def layer_slices(self) -> list[slice]:
        """One slice of theta per (W, b) pair, for block preconditioners."""
        out = []
        for i in range(0, len(self.shape_table), 2):
            _, _, wo = self.shape_table[i]
            br, _, bo = self.shape_table[i + 1]
            out.append(slice(wo, bo + br))
        return out


def init_params(arch: Architecture, seed: int) -> Params:
    """Fan-in-scaled normal weights, zero hidden biases, output bias 1.

    The positive output bias keeps the initial state away from nodes, which
    the strictly positive ground state never has. The Fourier matrix is
    drawn first (std ``fourier_scale``) so that enabling/disabling the
    embedding does not reshuffle the weight draws beyond the first layer
    shape change.
    """
    rng = np.random.default_rng(seed)
    m, d = arch.n_fourier, arch.input_dim
    fourier_b = rng.standard_normal((m, d)) * arch.fourier_scale

    dims = arch.layer_dims()
    sizes = []
    for rows, cols in dims:
        sizes.append(rows * cols)
        sizes.append(rows)
    total = sum(sizes)
    theta = np.zeros(total, dtype=np.float64)

    table = []
    offset = 0
    for li, (rows, cols) in enumerate(dims):
        gain = 0.1 if li == len(dims) - 1 else 1.0  # gentle head: smooth start
        w = gain * rng.standard_normal((rows, cols)) / np.sqrt(cols)
        theta[offset : offset + rows * cols] = w.ravel()
        table.append((rows, cols, offset))
        offset += rows * cols
        table.append((rows, 1, offset))
        if li == len(dims) - 1:
            theta[offset] = 1.0  # output bias
        offset += rows
    return Params(arch=arch, theta=theta, shape_table=tuple(table), fourier_b=fourier_b)


def embed(r: np.ndarray, fourier_b: np.ndarray) -> np.ndarray:
    """gamma(r) = [cos(2 pi B r), sin(2 pi B r)]; accepts (d,) or (N, d)."""
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 1
    if single:
        r = r[None, :]
    t = 2.0 * np.pi * (r @ fourier_b.T)
    out = np.concatenate([np.cos(t), np.sin(t)], axis=1)
    return out[0] if single else out


def _embed_with_derivs(R: np.ndarray, B: np.ndarray):
    """Features plus their input Jacobian and Laplacian for a batch."""
    n, d = R.shape
    m = B.shape[0]
    if m == 0:
        x = R
        jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        lap = np.zeros((n, d))
        return x, jac, lap
    t = 2.0 * np.pi * (R @ B.T)  # (n, m)
    c, s = np.cos(t), np.sin(t)
    x = np.concatenate([c, s], axis=1)
    tp = 2.0 * np.pi * B  # (m, d)
    jac = np.empty((n, 2 * m, d))
    jac[:, :m, :] = -s[:, :, None] * tp[None, :, :]
    jac[:, m:, :] = c[:, :, None] * tp[None, :, :]
    w2 = np.sum(tp * tp, axis=1)  # (m,)
    lap = np.concatenate([-c * w2[None, :], -s * w2[None, :]], axis=1)
    return x, jac, lap


def forward(params: Params, r: np.ndarray) -> float:
    """Scalar psi_theta(r)."""
    r = np.asarray(r, dtype=np.float64)
    return float(forward_batch(params, r[None, :])[0])


def forward_batch(params: Params, R: np.ndarray) -> np.ndarray:
    """psi values for a batch (N, d) -> (N,)."""
    R = np.asarray(R, dtype=np.float64)
    m = params.arch.n_fourier
    x = embed(R, params.fourier_b) if m > 0 else R
    layers = params.layers()
    for w, b in layers[:-1]:
        x = np.tanh(x @ w.T + b)
    w, b = layers[-1]
    return x @ w[0] + b[0]


def log_abs(params: Params, R: np.ndarray) -> np.ndarray:
    """ln|psi| for a batch; -inf at exact nodes."""
    psi = forward_batch(params, R)
    with np.errstate(divide="ignore"):
        return np.log(np.abs(psi))


def log_abs_and_drift(params: Params, R: np.ndarray):
    """(ln|psi|, grad_r ln|psi|) without the Laplacian or parameter sweeps.

    Fast path for HMC where only the drift is needed.
    """
    R = np.asarray(R, dtype=np.float64)
    n, d = R.shape
    m = params.arch.n_fourier
    if m > 0:
        t = 2.0 * np.pi * (R @ params.fourier_b.T)
        c, s = np.cos(t), np.sin(t)
        x = np.concatenate([c, s], axis=1)
        tp = 2.0 * np.pi * params.fourier_b
        jac = np.empty((n, 2 * m, d))
        jac[:, :m, :] = -s[:, :, None] * tp[None, :, :]
        jac[:, m:, :] = c[:, :, None] * tp[None, :, :]
    else:
        x = R
        jac = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    layers = params.layers()
    for w, b in layers[:-1]:
        z = x @ w.T + b
        jz = np.matmul(w, jac)
        x = np.tanh(z)
        jac = (1.0 - x * x)[:, :, None] * jz
    w, b = layers[-1]
    psi = x @ w[0] + b[0]
    grad = np.matmul(w[0], jac)  # (n, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = grad / psi[:, None]
        logp = np.log(np.abs(psi))
    return logp, drift


@dataclass
class EvalBundle:
    """Per-sample derivative package for one batch.

    ``score[n, p]`` is d ln|psi(r_n)| / d theta_p. ``mixed`` is stored
    dimension-major: ``mixed[j][n, p]`` is the spatial derivative of
    ``score[n, p]`` along r_j (contiguous (N, P) slab per dimension, which
    is what the Gram contractions consume).
    """

    psi: np.ndarray
    log_abs_psi: np.ndarray
    drift: np.ndarray
    lap_ratio: np.ndarray
    score: np.ndarray
    mixed: np.ndarray | None = None
    positions: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.psi.size

    @property
    def n_params(self) -> int:
        return self.score.shape[1]


def eval_bundle(
    params: Params,
    batch: np.ndarray,
    *,
    need_mixed: bool = True,
    chunk_size: int = 2048,
    store_dtype=np.float64,
    node_eps: float = 1e-30,
) -> EvalBundle:
    """Exact values and first/second derivatives for every sample.

    Raises NodeCrossing if any |psi| falls below ``node_eps``. Results are
    a pure function of (params, batch): chunks are processed in a fixed
    order and written into preallocated outputs, so the chunk size never
    changes the result.
    """
    R = np.ascontiguousarray(batch, dtype=np.float64)
    if R.ndim != 2 or R.shape[1] != params.arch.input_dim:
        raise ValueError(f"batch must be (N, {params.arch.input_dim})")
    n, d = R.shape
    p = params.n_params

    psi = np.empty(n)
    drift = np.empty((n, d))
    lap_ratio = np.empty(n)
    score = np.empty((n, p), dtype=store_dtype)
    mixed = np.empty((d, n, p), dtype=store_dtype) if need_mixed else None

    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        _bundle_chunk(
            params,
            R[start:stop],
            psi[start:stop],
            drift[start:stop],
            lap_ratio[start:stop],
            score[start:stop],
            None if mixed is None else mixed[:, start:stop],
            node_eps,
        )

    log_abs_psi = np.log(np.abs(psi))
    return EvalBundle(
        psi=psi,
        log_abs_psi=log_abs_psi,
        drift=drift,
        lap_ratio=lap_ratio,
        score=score,
        mixed=mixed,
        positions=R,
    )


def _bundle_chunk(params, R, out_psi, out_drift, out_lap, out_score, out_mixed, node_eps):
    n, d = R.shape
    layers = params.layers()
    n_hidden = len(layers) - 1
    need_mixed = out_mixed is not None
    c = 1 + d if need_mixed else 1
    ct = out_score.dtype  # reverse-sweep compute dtype follows storage

    # Forward sweep: value, input Jacobian, input Laplacian per layer.
    x, jx, lx = _embed_with_derivs(R, params.fourier_b)
    cache = []
    for w, b in layers[:-1]:
        z = x @ w.T + b
        jz = np.matmul(w, jx)
        lz = lx @ w.T
        a = np.tanh(z)
        s1 = 1.0 - a * a
        s2 = -2.0 * a * s1
        ja = s1[:, :, None] * jz
        la = s2 * np.sum(jz * jz, axis=-1) + s1 * lz
        cache.append((x, jx, s1, s2, jz))
        x, jx, lx = a, ja, la

    w_out, b_out = layers[-1]
    wv = w_out[0]
    psi = x @ wv + b_out[0]
    gpsi = np.matmul(wv, jx)  # (n, d)
    lpsi = lx @ wv

    bad = np.flatnonzero(np.abs(psi) < node_eps)
    if bad.size:
        raise NodeCrossing(bad.tolist(), node_eps)

    out_psi[:] = psi
    inv_psi = 1.0 / psi
    out_drift[:] = gpsi * inv_psi[:, None]
    out_lap[:] = lpsi * inv_psi

    # Reverse sweep. The sweep is linear in the adjoint seeds, so the 1/psi
    # scaling of the score and the -O*F_j correction of the mixed channels
    # are folded into the seeds: channel 0 then yields O directly and
    # channel 1+j yields grad_r_j O. adj_a = ds/da is (n, c, H); adj_j =
    # ds/dJa is (n, c, d, H), dimension-major like the mixed output.
    scale = inv_psi.astype(ct)
    fscal = (out_drift * inv_psi[:, None]).astype(ct)  # F_j / psi
    wvc = wv.astype(ct)
    adj_a = np.zeros((n, c, x.shape[1]), dtype=ct)
    adj_a[:, 0, :] = wvc * scale[:, None]
    if need_mixed:
        adj_j = np.zeros((n, c, d, x.shape[1]), dtype=ct)
        for j in range(d):
            adj_a[:, 1 + j, :] = wvc * (-fscal[:, j : j + 1])
            adj_j[:, 1 + j, j, :] = wvc * scale[:, None]
    else:
        adj_j = None

    def views(layer_index):
        """Per-channel contiguous views into the flat outputs for one layer."""
        wr, wc_, wo = params.shape_table[2 * layer_index]
        br, _, bo = params.shape_table[2 * layer_index + 1]
        vw = [out_score[:, wo : wo + wr * wc_].reshape(n, wr, wc_)]
        vb = [out_score[:, bo : bo + br]]
        if need_mixed:
            for j in range(d):
                vw.append(out_mixed[j, :, wo : wo + wr * wc_].reshape(n, wr, wc_))
                vb.append(out_mixed[j, :, bo : bo + br])
        return vw, vb

    # Output layer gradients (linear head).
    vw, vb = views(n_hidden)
    np.multiply(x, scale[:, None], out=vw[0].reshape(n, -1), casting="unsafe")
    vb[0][:, 0] = scale
    if need_mixed:
        jxs = jx * inv_psi[:, None, None]
        for j in range(d):
            np.subtract(
                jxs[:, :, j].astype(ct),
                x.astype(ct) * fscal[:, j : j + 1],
                out=vw[1 + j].reshape(n, -1),
                casting="unsafe",
            )
            vb[1 + j][:, 0] = -fscal[:, j]

    for li in range(n_hidden - 1, -1, -1):
        x_prev, jx_prev, s1, s2, jz = cache[li]
        s1 = s1.astype(ct)
        xp = x_prev.astype(ct)
        zbar = adj_a * s1[:, None, :]
        if need_mixed:
            jzt = jz.transpose(0, 2, 1).astype(ct)  # (n, d, H)
            zbar += np.sum(adj_j * jzt[:, None, :, :], axis=2) * s2.astype(ct)[:, None, :]
            jzbar = adj_j * s1[:, None, None, :]
            jxt = np.ascontiguousarray(jx_prev.transpose(0, 2, 1)).astype(ct)  # (n, d, F)
        vw, vb = views(li)
        for ci in range(c):
            np.multiply(zbar[:, ci, :, None], xp[:, None, :], out=vw[ci])
            if need_mixed:
                vw[ci] += np.matmul(jzbar[:, ci].transpose(0, 2, 1), jxt)
            vb[ci][:] = zbar[:, ci]
        if li > 0:
            w = layers[li][0].astype(ct)
            fin = w.shape[1]
            adj_a = (zbar.reshape(n * c, -1) @ w).reshape(n, c, fin)
            if need_mixed:
                adj_j = (jzbar.reshape(n * c * d, -1) @ w).reshape(n, c, d, fin)


def save_params(params: Params, path) -> None:
    """Binary format: magic, u64 counts/shape table, f64 theta, f64 B."""
    table = params.shape_table
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<Q", params.n_params))
        f.write(struct.pack("<Q", len(table)))
        for rows, cols, offset in table:
            f.write(struct.pack("<QQQ", rows, cols, offset))
        m, d = params.fourier_b.shape
        f.write(struct.pack("<QQ", m, d))
        f.write(struct.pack("<d", params.arch.fourier_scale))
        f.write(struct.pack("<Q", params.arch.hidden_layers))
        f.write(params.theta.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(params.fourier_b, dtype="<f8").tobytes())


def load_params(path) -> Params:
    with open(path, "rb") as f:
        if f.read(4) != PARAMS_MAGIC:
            raise ValueError(f"{path}: not a params file")
        (p,) = struct.unpack("<Q", f.read(8))
        (n_entries,) = struct.unpack("<Q", f.read(8))
        table = tuple(struct.unpack("<QQQ", f.read(24)) for _ in range(n_entries))
        m, d = struct.unpack("<QQ", f.read(16))
        (fourier_scale,) = struct.unpack("<d", f.read(8))
        (hidden_layers,) = struct.unpack("<Q", f.read(8))
        theta = np.frombuffer(f.read(8 * p), dtype="<f8").copy()
        fourier_b = np.frombuffer(f.read(8 * m * d), dtype="<f8").copy().reshape(m, d)
    width = table[0][0]
    arch = Architecture(
        input_dim=int(d),
        n_fourier=int(m),
        fourier_scale=fourier_scale,
        hidden_layers=int(hidden_layers),
        hidden_width=int(width),
    )
    return Params(arch=arch, theta=theta, shape_table=table, fourier_b=fourier_b)
