import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdeconv.core import DegenerateComponentError, GmmParams, SuffStatAccumulator
from xdeconv.data import Dataset, generate_synthetic, split, three_blobs
from xdeconv.em import (
    EmConfig,
    MinibatchStats,
    _stats_from_posterior,
    accumulate,
    adjust,
    fit_em,
    m_step_naive,
    m_step_stable,
    minibatch_stats,
)
from xdeconv.init import kmeans_init
from xdeconv.likelihood import ComponentPosterior, mean_log_likelihood

from conftest import random_dataset, random_params


def loop_stats(params, data):
    """Per-point, per-component sums with explicit inverses."""
    K, d = params.K, params.d
    q = np.zeros(K)
    s = np.zeros((K, d))
    S = np.zeros((K, d, d))
    for i, x in enumerate(data.X):
        R = np.eye(data.d_obs) if data.R is None else data.R[i]
        dens, bs, Bs = [], [], []
        for a, m, V in zip(params.alpha, params.means, params.covs):
            T = R @ V @ R.T + data.S[i]
            Ti = np.linalg.inv(T)
            e = x - R @ m
            dens.append(a * math.exp(-0.5 * e @ Ti @ e) / math.sqrt(np.linalg.det(2 * math.pi * T)))
            bs.append(m + V @ R.T @ Ti @ e)
            Bs.append(V - V @ R.T @ Ti @ R @ V)
        r = np.array(dens) / sum(dens)
        for j in range(K):
            q[j] += r[j]
            s[j] += r[j] * bs[j]
            S[j] += r[j] * (np.outer(bs[j], bs[j]) + Bs[j])
    return q, s, S


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


class TestMinibatchStats:
    def test_single_component(self, rng):
        p = random_params(rng, 1, 2)
        data = random_dataset(rng, 9, 2)
        st_ = minibatch_stats(p, data)
        post = st_.posterior
        assert st_.q[0] == 9.0
        np.testing.assert_allclose(st_.s[0], post.b[:, 0].sum(0), rtol=1e-14)
        second = np.einsum("na,nb->ab", post.b[:, 0], post.b[:, 0]) + post.B[:, 0].sum(0)
        np.testing.assert_allclose(st_.S[0], second, rtol=1e-13)

    def test_noiseless_single_component(self, rng):
        p = random_params(rng, 1, 2)
        data = random_dataset(rng, 7, 2, noise="zero")
        st_ = minibatch_stats(p, data)
        np.testing.assert_allclose(st_.s[0], data.X.sum(0), rtol=1e-12)
        np.testing.assert_allclose(st_.S[0], data.X.T @ data.X, rtol=1e-10)

    def test_matches_loop_oracle(self, rng):
        p = random_params(rng, 3, 2)
        data = random_dataset(rng, 8, 2)
        q, s, S = loop_stats(p, data)
        st_ = minibatch_stats(p, data)
        np.testing.assert_allclose(st_.q, q, rtol=1e-12)
        np.testing.assert_allclose(st_.s, s, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(st_.S, S, rtol=1e-12, atol=1e-12)
        assert st_.q.sum() == pytest.approx(8, abs=1e-9)

    def test_matches_loop_oracle_with_projection(self, rng):
        p = random_params(rng, 2, 3)
        data = random_dataset(rng, 8, 2, 3, projection=True)
        q, s, S = loop_stats(p, data)
        st_ = minibatch_stats(p, data)
        np.testing.assert_allclose(st_.q, q, rtol=1e-11)
        np.testing.assert_allclose(st_.s, s, rtol=1e-11, atol=1e-11)
        np.testing.assert_allclose(st_.S, S, rtol=1e-11, atol=1e-11)

    def test_chunked_merge_matches_single_pass(self, rng, monkeypatch):
        from xdeconv import likelihood

        p = random_params(rng, 3, 2)
        data = random_dataset(rng, 60, 2)
        whole = minibatch_stats(p, data)
        monkeypatch.setattr(likelihood, "CHUNK", 11)
        from xdeconv import em

        monkeypatch.setattr(em, "_chunks", lambda n: likelihood._chunks(n, 11))
        merged = minibatch_stats(p, data)
        np.testing.assert_allclose(merged.q, whole.q, rtol=1e-13)
        np.testing.assert_allclose(merged.covs, whole.covs, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(merged.S, whole.S, rtol=1e-12)


class TestAccumulate:
    def _acc(self, q):
        K = len(q)
        return SuffStatAccumulator(np.array(q, float), np.ones((K, 1)), np.ones((K, 1, 1)))

    def _stats(self, q):
        K = len(q)
        q = np.array(q, float)
        return MinibatchStats(q, 2 * np.ones((K, 1)), 3 * np.ones((K, 1, 1)), np.ones((K, 1, 1)), 1)

    def test_zero_step_keeps_accumulator(self):
        out = accumulate(self._acc([4.0]), self._stats([2.0]), 0.0)
        assert out.q_hat[0] == 4.0 and out.s_hat[0, 0] == 1.0 and out.S_hat[0, 0, 0] == 1.0

    def test_unit_step_replaces_accumulator(self):
        out = accumulate(self._acc([4.0]), self._stats([2.0]), 1.0)
        assert out.q_hat[0] == 2.0 and out.s_hat[0, 0] == 2.0 and out.S_hat[0, 0, 0] == 3.0

    def test_half_step_averages(self):
        assert accumulate(self._acc([4.0]), self._stats([2.0]), 0.5).q_hat[0] == 3.0

    def test_component_mismatch(self):
        with pytest.raises(ValueError):
            accumulate(self._acc([1.0, 1.0]), self._stats([1.0]), 0.5)


class TestNaiveMStep:
    def test_two_points(self):
        data = Dataset(np.array([[-1.0], [1.0]]), np.zeros((2, 1, 1)))
        p = GmmParams(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)))
        st_ = minibatch_stats(p, data)
        acc = accumulate(SuffStatAccumulator.from_params(p, 2), st_, 1.0)
        out = m_step_naive(acc, 2)
        assert out.alpha[0] == 1.0
        assert out.means[0, 0] == pytest.approx(0.0, abs=1e-15)
        assert out.covs[0, 0, 0] == pytest.approx(1.0, rel=1e-14)

    def test_single_point_collapses(self):
        data = Dataset(np.array([[0.7, -0.2]]), np.zeros((1, 2, 2)))
        p = GmmParams(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])
        acc = accumulate(SuffStatAccumulator.from_params(p, 1), minibatch_stats(p, data), 1.0)
        out = m_step_naive(acc, 1)
        np.testing.assert_allclose(out.means[0], [0.7, -0.2])
        np.testing.assert_allclose(out.covs[0], 0.0, atol=1e-15)

    def test_weights_normalised(self, rng):
        q = rng.uniform(1, 5, size=4)
        q *= 50 / q.sum()
        acc = SuffStatAccumulator(q, rng.normal(size=(4, 2)), np.stack([np.eye(2) * 100] * 4))
        assert m_step_naive(acc, 50).alpha.sum() == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_component(self):
        acc = SuffStatAccumulator(np.array([5.0, 1e-12]), np.zeros((2, 1)), np.ones((2, 1, 1)))
        with pytest.raises(DegenerateComponentError) as info:
            m_step_naive(acc, 5)
        assert info.value.component == 1


class TestAdjust:
    def test_same_mean_is_identity(self, rng):
        V = random_params(rng, 1, 3).covs[0]
        c = rng.normal(size=3)
        np.testing.assert_allclose(adjust(V, 1.0, c, c), V, rtol=1e-14, atol=1e-15)

    def test_scalar_example(self):
        np.testing.assert_allclose(adjust(np.array([[1.0]]), 2.0, np.array([1.0]), np.array([0.0])), [[4.0]])

    @settings(max_examples=100)
    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_matches_expanded_form(self, d, seed):
        rng = np.random.default_rng(seed)
        V = random_params(rng, 1, d).covs[0]
        s = rng.uniform(0.05, 3.0)
        c, dd = rng.normal(size=(2, d))
        expanded = s * (V + np.outer(c, c)) - np.outer(dd, dd)
        got = adjust(V, s, c, dd)
        scale = np.abs(s * V).max() + s * np.abs(c).max() ** 2 + np.abs(dd).max() ** 2
        assert np.abs(got - expanded).max() <= 1e-12 * scale
        np.testing.assert_array_equal(got, got.T)

    def test_broadcasts_over_components(self, rng):
        p = random_params(rng, 3, 2)
        s = np.array([0.5, 1.0, 2.0])
        c, dd = rng.normal(size=(2, 3, 2))
        batched = adjust(p.covs, s, c, dd)
        for j in range(3):
            np.testing.assert_allclose(batched[j], adjust(p.covs[j], s[j], c[j], dd[j]), rtol=1e-15)


def random_state(rng, K, d, M):
    p0 = random_params(rng, K, d)
    acc = SuffStatAccumulator.from_params(p0, M)
    batch = random_dataset(rng, M, d, noise="diag")
    return p0, acc, minibatch_stats(p0, batch)


def strip(acc):
    return SuffStatAccumulator(acc.q_hat, acc.s_hat, acc.S_hat)


class TestStableMStep:
    def test_zero_step_leaves_parameters(self, rng):
        p0, acc, stats = random_state(rng, 3, 2, 16)
        p1, acc1 = m_step_stable(acc, stats, 0.0, 16)
        np.testing.assert_allclose(p1.alpha, p0.alpha, rtol=1e-14)
        np.testing.assert_allclose(p1.means, p0.means, rtol=1e-14)
        np.testing.assert_allclose(p1.covs, p0.covs, rtol=1e-13)

    def test_unit_step_full_batch_is_batch_m_step(self, rng):
        p0 = random_params(rng, 3, 2)
        data = random_dataset(rng, 50, 2, noise="diag")
        stats = minibatch_stats(p0, data)
        p1, _ = m_step_stable(SuffStatAccumulator.from_params(p0, 50), stats, 1.0, 50)
        # batch M-step written out from the posterior
        post = stats.posterior
        q = post.r.sum(0)
        m = np.einsum("nk,nka->ka", post.r, post.b) / q[:, None]
        V = np.einsum("nk,nkab->kab", post.r, np.einsum("nka,nkb->nkab", post.b, post.b) + post.B) / q[:, None, None]
        V -= np.einsum("ka,kb->kab", m, m)
        np.testing.assert_allclose(p1.alpha, q / 50, rtol=1e-12)
        np.testing.assert_allclose(p1.means, m, rtol=1e-10)
        np.testing.assert_allclose(p1.covs, V, rtol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.floats(0.001, 1.0), st.integers(0, 2**32 - 1))
    def test_agrees_with_naive(self, d, K, lam, seed):
        rng = np.random.default_rng(seed)
        M = 16
        _, acc, stats = random_state(rng, K, d, M)
        stable, acc_s = m_step_stable(acc, stats, lam, M)
        naive = m_step_naive(accumulate(strip(acc), stats, lam), M)
        assert rel_err(stable.alpha, naive.alpha) < 1e-10
        assert rel_err(stable.means, naive.means) < 1e-10
        assert rel_err(stable.covs, naive.covs) < 1e-10
        assert acc_s.q_hat.sum() == pytest.approx(M, rel=1e-12)

    def test_sequences_agree(self, rng):
        K, d, M, lam = 3, 2, 16, 0.3
        p = random_params(rng, K, d)
        acc_s = SuffStatAccumulator.from_params(p, M)
        acc_n = strip(acc_s)
        for _ in range(6):
            stats = minibatch_stats(p, random_dataset(rng, M, d, noise="diag"))
            p, acc_s = m_step_stable(acc_s, stats, lam, M)
            acc_n = accumulate(acc_n, stats, lam)
            naive = m_step_naive(acc_n, M)
            assert rel_err(p.covs, naive.covs) < 1e-10
            assert rel_err(p.means, naive.means) < 1e-10

    def test_regularisation_only_touches_output(self, rng):
        _, acc, stats = random_state(rng, 2, 2, 16)
        p0, a0 = m_step_stable(acc, stats, 0.2, 16, reg_w=0.0)
        p1, a1 = m_step_stable(acc, stats, 0.2, 16, reg_w=1e-3)
        np.testing.assert_allclose(p1.covs - p0.covs, np.broadcast_to(1e-3 * np.eye(2), (2, 2, 2)), atol=1e-15)
        np.testing.assert_array_equal(a0.covs, a1.covs)

    def test_single_precision_beats_naive(self):
        errs = single_precision_errors(seed=0, steps=20)
        assert errs["stable"] < 1e-3
        assert errs["naive"] > errs["stable"]


def single_precision_errors(seed, steps):
    """Run stable and naive online M-steps in float32 against a float64 reference.

    Components sit near 1e3 with unit variance; E-step posteriors come from
    the float64 reference parameters, then every M-step quantity is computed
    in float32.
    """
    M, lam = 500, 0.01
    truth = GmmParams(
        np.array([0.6, 0.4]),
        np.array([[1000.0, 1001.0], [1003.0, 998.0]]),
        np.stack([np.eye(2), np.array([[1.0, 0.3], [0.3, 0.8]])]),
    )
    data, _ = generate_synthetic(truth, M * steps, seed=seed, sigma_range=(0.1, 0.5))
    p = truth
    acc64 = SuffStatAccumulator.from_params(truth, M)
    acc_s32 = SuffStatAccumulator(*(a.astype(np.float32) for a in (acc64.q_hat, acc64.s_hat, acc64.S_hat, acc64.covs)))
    acc_n32 = strip(acc_s32)
    worst = {"stable": 0.0, "naive": 0.0}
    for t in range(steps):
        batch = data.subset(np.arange(t * M, (t + 1) * M))
        stats64 = minibatch_stats(p, batch)
        post = stats64.posterior
        post32 = ComponentPosterior(*(np.asarray(a, np.float32) for a in (post.r, post.b, post.B, post.logdens)))
        stats32 = MinibatchStats(*_stats_from_posterior(post32), n=M)
        ref = m_step_naive(accumulate(strip(acc64), stats64, lam), M)
        p, acc64 = m_step_stable(acc64, stats64, lam, M)
        stable32, acc_s32 = m_step_stable(acc_s32, stats32, np.float32(lam), M)
        acc_n32 = accumulate(acc_n32, stats32, np.float32(lam))
        naive32 = m_step_naive(acc_n32, M)
        assert stable32.covs.dtype == np.float32 and naive32.covs.dtype == np.float32
        ref_var = np.diagonal(ref.covs, axis1=1, axis2=2)
        for key, got in (("stable", stable32), ("naive", naive32)):
            var = np.diagonal(got.covs, axis1=1, axis2=2).astype(float)
            worst[key] = max(worst[key], float(np.max(np.abs(var - ref_var) / ref_var)))
    return worst


def blob_data(seed, n=2000, d=2):
    truth = three_blobs(max(d, 2))
    if d != truth.d:
        truth = GmmParams(truth.alpha, truth.means[:, :d], truth.covs[:, :d, :d])
    data, _ = generate_synthetic(truth, n, seed=seed, sigma_range=(0.2, 1.0))
    return data, truth


class TestFitEm:
    def test_batch_log_likelihood_never_decreases(self):
        data, _ = blob_data(1, 1500)
        init = kmeans_init(data.X, 3, seed=1)
        rep = fit_em(data, init, EmConfig(mode="batch", epochs=15, reg_w=0.0))
        lls = [rep.initial_train_ll] + [r.train_ll for r in rep.epochs]
        assert all(b >= a - 1e-8 for a, b in zip(lls, lls[1:]))

    def test_unit_step_full_batch_matches_batch_mode(self):
        data, _ = blob_data(2, 600)
        init = kmeans_init(data.X, 3, seed=2)
        batch = fit_em(data, init, EmConfig(mode="batch", epochs=4))
        mb = fit_em(data, init, EmConfig(mode="minibatch", batch_size=len(data), step_size=1.0, halve_step_at=(), epochs=4, seed=9))
        np.testing.assert_allclose(mb.params.covs, batch.params.covs, rtol=1e-10)
        np.testing.assert_allclose(mb.params.means, batch.params.means, rtol=1e-10)
        for a, b in zip(mb.epochs, batch.epochs):
            assert a.train_ll == pytest.approx(b.train_ll, rel=1e-10)

    def test_invariants_hold_after_every_update(self, monkeypatch):
        from xdeconv import em

        data, _ = blob_data(3, 1100)
        init = kmeans_init(data.X, 3, seed=3)
        seen = []
        real = em.m_step_stable

        def spy(*args, **kwargs):
            params, acc = real(*args, **kwargs)
            seen.append((params.alpha.sum(), acc.q_hat.sum()))
            params.check(atol=1e-6)
            return params, acc

        monkeypatch.setattr(em, "m_step_stable", spy)
        rep = fit_em(data, init, EmConfig(batch_size=500, epochs=2))
        assert len(seen) == 6  # 1100 points -> 3 minibatches per epoch
        for alpha_sum, q_sum in seen:
            assert abs(alpha_sum - 1) < 1e-6
            assert q_sum == pytest.approx(500, rel=1e-6)
        assert rep.notes and "100 points" in rep.notes[0]

    def test_report_shape_and_reproducibility(self):
        data, _ = blob_data(4, 1200)
        init = kmeans_init(data.X, 3, seed=4)
        cfg = EmConfig(batch_size=300, epochs=3, seed=5)
        a = fit_em(data, init, cfg)
        b = fit_em(data, init, cfg)
        assert [r.epoch for r in a.epochs] == [1, 2, 3]
        clocks = [r.wall_clock for r in a.epochs]
        assert clocks == sorted(clocks)
        assert a.numeric_fields() == b.numeric_fields()
        assert a.config["step_schedule"] == [[0, 0.01], [10, 0.005]]

    def test_degenerate_component_is_reported(self):
        data, truth = blob_data(5, 400)
        far = GmmParams(
            np.array([0.5, 0.5]),
            np.array([[0.0, 0.0], [1e4, 1e4]]),
            np.stack([np.eye(2), np.eye(2) * 1e-2]),
        )
        with pytest.raises(DegenerateComponentError) as info:
            fit_em(data, far, EmConfig(mode="batch", epochs=3))
        assert info.value.component == 1
        assert info.value.iteration == 0
        assert info.value.report.status == "failed"

    def test_recovers_generating_density(self):
        data, truth = blob_data(6, 6000, d=2)
        train, val, test = split(data, (0.8, 0.1, 0.1), seed=6)
        init = kmeans_init(train.X, 3, seed=6)
        rep = fit_em(train, init, EmConfig(epochs=20, seed=6), val_data=val)
        assert mean_log_likelihood(rep.params, test) > mean_log_likelihood(truth, test) - 0.05
        assert rep.final_val_ll is not None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EmConfig(step_size=0.0)
        with pytest.raises(ValueError):
            EmConfig(step_size=1.5)
        with pytest.raises(ValueError):
            EmConfig(mode="other")
        with pytest.raises(ValueError):
            EmConfig(reg_w=-1)
