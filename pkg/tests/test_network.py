"""Wavefunction module: embedding, forward pass, exact derivatives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpe_ngd.errors import NodeCrossing
from gpe_ngd.network import (
    Architecture,
    embed,
    eval_bundle,
    forward,
    forward_batch,
    init_params,
    load_params,
    save_params,
)

from conftest import ARCH_MATRIX, fd_drift, fd_lap_ratio, fd_score, randomized_params, rel_err


def small_arch(d=2, m=4):
    return Architecture(input_dim=d, n_fourier=m, fourier_scale=0.5, hidden_layers=2, hidden_width=4)


class TestInit:
    def test_deterministic(self):
        arch = small_arch()
        a = init_params(arch, seed=42)
        b = init_params(arch, seed=42)
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.fourier_b, b.fourier_b)

    def test_seed_sensitivity(self):
        arch = small_arch()
        a = init_params(arch, seed=1)
        b = init_params(arch, seed=2)
        assert not np.array_equal(a.theta, b.theta)

    def test_m_zero_disables_embedding(self):
        arch = small_arch(d=3, m=0)
        p = init_params(arch, seed=0)
        assert p.fourier_b.shape == (0, 3)
        assert arch.n_features == 3

    def test_param_count_matches_table(self):
        for arch in ARCH_MATRIX:
            p = init_params(arch, seed=0)
            total = sum(r * c for r, c, _ in p.shape_table)
            assert p.n_params == total == p.theta.size

    def test_flatten_round_trip_is_identity(self):
        p = init_params(small_arch(), seed=3)
        rebuilt = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in p.layers()])
        assert np.array_equal(rebuilt, p.theta)

    def test_fourier_not_in_theta(self):
        p = init_params(small_arch(), seed=3)
        theta_before = p.fourier_b.copy()
        p2 = p.with_theta(p.theta + 1.0)
        assert np.array_equal(p2.fourier_b, theta_before)

    def test_invalid_arch_rejected(self):
        with pytest.raises(ValueError):
            Architecture(input_dim=0)
        with pytest.raises(ValueError):
            Architecture(input_dim=1, n_fourier=-1)
        with pytest.raises(ValueError):
            Architecture(input_dim=1, hidden_layers=0)


class TestEmbed:
    def test_zero_input(self):
        B = np.array([[0.7, -0.3], [1.1, 0.2]])
        out = embed(np.zeros(2), B)
        np.testing.assert_allclose(out, [1, 1, 0, 0], atol=1e-15)

    def test_quarter_period(self):
        out = embed(np.array([0.25]), np.array([[1.0]]))
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-13)

    @given(st.integers(-5, 5), st.integers(-5, 5), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=40, deadline=None)
    def test_integer_frequency_periodicity(self, k1, k2, x, y):
        B = np.array([[1.0, 0.0], [2.0, -1.0]])  # integer entries
        r = np.array([x, y])
        shifted = embed(r + np.array([k1, k2]), B)
        np.testing.assert_allclose(shifted, embed(r, B), atol=1e-9)

    def test_batch_matches_single(self):
        B = np.random.default_rng(0).standard_normal((3, 2))
        R = np.random.default_rng(1).standard_normal((5, 2))
        batched = embed(R, B)
        for i in range(5):
            np.testing.assert_allclose(batched[i], embed(R[i], B), atol=1e-15)


def reference_forward(params, r):
    """Straightforward loop reimplementation of the forward recursion."""
    m = params.arch.n_fourier
    if m > 0:
        t = 2 * np.pi * params.fourier_b @ r
        x = np.concatenate([np.cos(t), np.sin(t)])
    else:
        x = np.asarray(r, dtype=float)
    layers = params.layers()
    for w, b in layers[:-1]:
        x = np.tanh(w @ x + b)
    w, b = layers[-1]
    return float(w[0] @ x + b[0])


class TestForward:
    def test_constant_network(self):
        arch = small_arch()
        p = init_params(arch, seed=0)
        theta = np.zeros_like(p.theta)
        bias_off = p.shape_table[-1][2]
        theta[bias_off] = 2.5
        p = p.with_theta(theta)
        for r in np.random.default_rng(0).uniform(-3, 3, size=(10, 2)):
            assert forward(p, r) == pytest.approx(2.5, abs=0)

    def test_linear_head(self):
        p = randomized_params(small_arch(), seed=5)
        r = np.array([0.3, -0.7])
        base = forward(p, r)
        w_off = p.shape_table[-2][2]
        for delta in (1e-3, 2e-3, 4e-3):
            theta = p.theta.copy()
            theta[w_off] += delta
            diff = forward(p.with_theta(theta), r) - base
            assert diff == pytest.approx(delta * (diff / delta), rel=0)
        # slope is constant in delta (linearity)
        theta1 = p.theta.copy()
        theta1[w_off] += 1e-3
        theta2 = p.theta.copy()
        theta2[w_off] += 2e-3
        d1 = forward(p.with_theta(theta1), r) - base
        d2 = forward(p.with_theta(theta2), r) - base
        assert d2 == pytest.approx(2 * d1, rel=1e-9)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(11)
        for arch in ARCH_MATRIX[:6]:
            p = randomized_params(arch, seed=17)
            R = rng.uniform(-2, 2, size=(4, arch.input_dim))
            got = forward_batch(p, R)
            want = [reference_forward(p, r) for r in R]
            np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


class TestEvalBundle:
    @pytest.mark.parametrize("arch", ARCH_MATRIX, ids=lambda a: f"d{a.input_dim}m{a.n_fourier}L{a.hidden_layers}")
    def test_fd_oracles(self, arch):
        p = randomized_params(arch, seed=101 + arch.input_dim)
        rng = np.random.default_rng(7 * arch.input_dim + arch.n_fourier)
        R = rng.uniform(-1.5, 1.5, size=(5, arch.input_dim))
        b = eval_bundle(p, R)
        assert rel_err(b.score, fd_score(p, R)) < 1e-6
        assert rel_err(b.drift, fd_drift(p, R)) < 1e-6
        assert rel_err(b.lap_ratio, fd_lap_ratio(p, R)) < 1e-6
        h = 1e-5
        for j in range(arch.input_dim):
            rp = R.copy()
            rp[:, j] += h
            rm = R.copy()
            rm[:, j] -= h
            k_fd = (eval_bundle(p, rp).score - eval_bundle(p, rm).score) / (2 * h)
            assert rel_err(b.mixed[j], k_fd) < 1e-5

    def test_log_identity(self):
        # lap_ratio = Delta ln|psi| + |F|^2; the left side comes from the
        # psi-space propagation, the right from FD of the log plus the
        # analytic drift, so the comparison is FD-limited.
        arch = small_arch(d=2, m=4)
        p = randomized_params(arch, seed=3)
        R = np.random.default_rng(5).uniform(-1, 1, size=(6, 2))
        b = eval_bundle(p, R)
        h = 3e-4
        lap_log = np.zeros(6)
        from gpe_ngd.network import log_abs

        logs0 = log_abs(p, R)

        def d2(hh):
            acc = np.zeros(6)
            for j in range(2):
                rp = R.copy()
                rp[:, j] += hh
                rm = R.copy()
                rm[:, j] -= hh
                acc += (log_abs(p, rp) - 2 * logs0 + log_abs(p, rm)) / hh**2
            return acc

        lap_log = (4 * d2(h / 2) - d2(h)) / 3
        lhs = b.lap_ratio
        rhs = lap_log + np.sum(b.drift**2, axis=1)
        assert np.max(np.abs(lhs - rhs)) < 1e-5

    def test_scale_equivariance(self):
        arch = small_arch()
        p = randomized_params(arch, seed=21)
        R = np.random.default_rng(2).uniform(-1, 1, size=(4, 2))
        b0 = eval_bundle(p, R)
        c = 3.0
        theta = p.theta.copy()
        w_off = p.shape_table[-2][2]
        theta[w_off:] *= c  # output weights and bias
        b1 = eval_bundle(p.with_theta(theta), R)
        np.testing.assert_allclose(b1.psi, c * b0.psi, rtol=1e-12)
        np.testing.assert_allclose(b1.drift, b0.drift, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(b1.lap_ratio, b0.lap_ratio, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(b1.score[:, :w_off], b0.score[:, :w_off], rtol=1e-10, atol=1e-12)

    def test_purity_and_chunk_independence(self):
        arch = small_arch(d=3, m=4)
        p = randomized_params(arch, seed=9)
        R = np.random.default_rng(3).uniform(-1, 1, size=(17, 3))
        a = eval_bundle(p, R, chunk_size=17)
        b = eval_bundle(p, R, chunk_size=17)
        c = eval_bundle(p, R, chunk_size=4)
        # same chunk plan -> bitwise identical (pure function)
        assert np.array_equal(a.score, b.score)
        assert np.array_equal(a.mixed, b.mixed)
        # different chunk plan -> identical up to BLAS blocking rounding
        np.testing.assert_allclose(a.score, c.score, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.mixed, c.mixed, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.psi, c.psi, rtol=0, atol=1e-14)

    def test_node_crossing(self):
        arch = small_arch()
        p = init_params(arch, seed=0)
        theta = np.zeros_like(p.theta)  # psi identically zero bias -> 0
        p = p.with_theta(theta)
        with pytest.raises(NodeCrossing):
            eval_bundle(p, np.zeros((3, 2)))

    def test_f32_storage_close_to_f64(self):
        arch = small_arch()
        p = randomized_params(arch, seed=33)
        R = np.random.default_rng(4).uniform(-1, 1, size=(8, 2))
        b64 = eval_bundle(p, R)
        b32 = eval_bundle(p, R, store_dtype=np.float32)
        assert b32.score.dtype == np.float32
        assert rel_err(b32.score.astype(np.float64), b64.score) < 1e-5
        assert rel_err(b32.mixed.astype(np.float64), b64.mixed) < 1e-5


class TestSerialization:
    def test_round_trip(self, tmp_path):
        for arch in (small_arch(), small_arch(d=3, m=0)):
            p = randomized_params(arch, seed=8)
            path = tmp_path / "params.bin"
            save_params(p, path)
            q = load_params(path)
            assert np.array_equal(p.theta, q.theta)
            assert np.array_equal(p.fourier_b, q.fourier_b)
            assert p.shape_table == q.shape_table
            assert q.arch == p.arch
            R = np.random.default_rng(0).uniform(-1, 1, size=(5, arch.input_dim))
            np.testing.assert_array_equal(forward_batch(p, R), forward_batch(q, R))

    def test_magic_check(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_params(path)
