import math

import numpy as np
import pytest

from fmtforge import tensor as tc
from fmtforge.diffusion import (
    NoisePredictor,
    ScheduleError,
    diffusion_loss,
    forward_noise,
    make_schedule,
    noised_batch,
    sample_actions,
    sinusoidal_embedding,
)
from fmtforge.model import FmtEncoder
from fmtforge.training import AdamW, Policy
from conftest import toy_config


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.01, 0.01)
        assert s.alpha_bars[0] == pytest.approx(0.99)
        assert s.alpha_bar(0) == 1.0

    def test_monotone_decreasing(self):
        s = make_schedule(100, 1e-4, 0.02)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(np.diff(s.betas) >= 0)
        assert 0 < s.betas[0] <= s.betas[-1] < 1

    def test_cumulative_product_oracle(self):
        s = make_schedule(100, 1e-4, 0.02)
        prod = 1.0
        for i in range(100):
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 99)
        assert abs(s.alpha_bars[-1] - prod) < 1e-9

    def test_invalid_ranges(self):
        with pytest.raises(ScheduleError):
            make_schedule(10, 0.0, 0.02)
        with pytest.raises(ScheduleError):
            make_schedule(10, 0.03, 0.02)
        with pytest.raises(ScheduleError):
            make_schedule(10, 0.5, 1.0)
        with pytest.raises(ScheduleError):
            make_schedule(0)


class TestForwardNoise:
    def test_k0_identity(self):
        s = make_schedule(10)
        a0 = np.random.default_rng(0).normal(size=(2, 4, 3))
        out = forward_noise(a0, 0, np.ones_like(a0), s)
        np.testing.assert_allclose(out, a0, atol=1e-12)

    def test_zero_noise_pure_scaling(self):
        s = make_schedule(10, 0.01, 0.1)
        a0 = np.random.default_rng(1).normal(size=(2, 4, 3))
        out = forward_noise(a0, 7, np.zeros_like(a0), s)
        np.testing.assert_allclose(out, np.sqrt(s.alpha_bars[6]) * a0, atol=1e-12)

    def test_variance_preservation_monte_carlo(self):
        s = make_schedule(100, 1e-4, 0.02)
        rng = np.random.default_rng(2)
        n = 100_000
        a0 = rng.standard_normal(n)
        for k in (1, 25, 100):
            eps = rng.standard_normal(n)
            ak = forward_noise(a0.reshape(n, 1, 1), k, eps.reshape(n, 1, 1), s)
            assert abs(ak.var() - 1.0) < 0.02  # ~3 sigma of the MC estimator

    def test_out_of_range_k(self):
        s = make_schedule(10)
        with pytest.raises(IndexError):
            forward_noise(np.zeros((1, 1, 1)), 11, np.zeros((1, 1, 1)), s)
        with pytest.raises(IndexError):
            s.alpha_bar(-1)


def make_head(cfg=None, seed=0, dtype=np.float32):
    cfg = cfg or toy_config()
    return NoisePredictor(cfg, np.random.default_rng(seed), dtype)


def random_obs(cfg, rng, batch=2, dtype=np.float32):
    return tc.constant(rng.normal(size=(batch, cfg.obs_tokens, cfg.d)), dtype=dtype)


class TestNoisePredictor:
    def test_output_shape(self, rng):
        cfg = toy_config()
        head = make_head(cfg)
        obs = random_obs(cfg, rng)
        out = head(rng.normal(size=(2, cfg.horizon, cfg.action_dim)), np.array([3, 7]), obs)
        assert out.shape == (2, cfg.horizon, cfg.action_dim)

    def test_causality_perturbation(self, rng):
        cfg = toy_config()
        head = make_head(cfg)
        obs = random_obs(cfg, rng, batch=1)
        a = rng.normal(size=(1, cfg.horizon, cfg.action_dim))
        base = head(a, np.array([5]), obs).data
        for j in range(cfg.horizon):
            pert = a.copy()
            pert[0, j] += 1.0
            out = head(pert, np.array([5]), obs).data
            np.testing.assert_array_equal(out[0, :j], base[0, :j])
            assert np.abs(out[0, j:] - base[0, j:]).max() > 0

    def test_conditioning_is_live(self, rng):
        cfg = toy_config()
        head = make_head(cfg)
        a = rng.normal(size=(2, cfg.horizon, cfg.action_dim))
        out1 = head(a, np.array([5, 5]), random_obs(cfg, rng)).data
        out2 = head(a, np.array([5, 5]), random_obs(cfg, rng)).data
        assert not np.allclose(out1, out2, atol=1e-6)

    def test_step_embedding_distinguishes_steps(self, rng):
        cfg = toy_config()
        head = make_head(cfg)
        obs = random_obs(cfg, rng, batch=1)
        a = rng.normal(size=(1, cfg.horizon, cfg.action_dim))
        out1 = head(a, np.array([1]), obs).data
        out2 = head(a, np.array([99]), obs).data
        assert not np.allclose(out1, out2, atol=1e-6)
        emb = sinusoidal_embedding(np.array([0, 1, 50]), 16)
        assert emb.shape == (3, 16)
        assert not np.allclose(emb[1], emb[2])


class TestLoss:
    def test_oracle_predictor_gives_zero_loss(self):
        s = make_schedule(50)
        rng = np.random.default_rng(3)
        a0 = rng.uniform(-1, 1, size=(8, 4, 3))
        a_k, ks, eps = noised_batch(a0, s, rng)
        loss = tc.mse_loss(tc.constant(eps), tc.constant(eps))
        assert float(loss.data) == 0.0

    def test_zero_predictor_loss_is_unit(self):
        s = make_schedule(50)
        rng = np.random.default_rng(4)
        a0 = rng.uniform(-1, 1, size=(2000, 4, 3))
        _, _, eps = noised_batch(a0, s, rng)
        loss = tc.mse_loss(tc.constant(np.zeros_like(eps)), tc.constant(eps))
        assert abs(float(loss.data) - 1.0) < 0.02

    def test_loss_decreases_on_fixed_batch(self, rng):
        cfg = toy_config()
        policy = Policy(cfg, seed=0)
        s = make_schedule(20)
        images = rng.uniform(size=(8, cfg.cameras, cfg.t_img, 16, 16)).astype(np.float32)
        ft = rng.normal(size=(8, cfg.ft_raw_len, 6)).astype(np.float32)
        actions = rng.uniform(-1, 1, size=(8, cfg.horizon, cfg.action_dim))
        opt = AdamW(policy.params(), lr=3e-4, weight_decay=1e-4)
        losses = []
        lrng = np.random.default_rng(5)
        for step in range(200):
            opt.zero_grad()
            obs = policy.encoder(images, ft)
            loss = diffusion_loss(policy.head, obs, actions, s, lrng)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        assert np.mean(losses[-20:]) < np.mean(losses[:20]) * 0.7


class TestSampler:
    def test_fixed_seed_bit_identical(self, rng):
        cfg = toy_config()
        head = make_head(cfg)
        obs = random_obs(cfg, rng)
        s = make_schedule(10)
        out1 = sample_actions(head, obs, s, np.random.default_rng(42), batch=2)
        out2 = sample_actions(head, obs, s, np.random.default_rng(42), batch=2)
        np.testing.assert_array_equal(out1, out2)
        assert np.all(out1 >= -1.0) and np.all(out1 <= 1.0)

    def test_k1_single_step_equals_clean_prediction(self, rng):
        # with K=1 the reverse-step mean reduces exactly to the x0 estimate
        cfg = toy_config()
        head = make_head(cfg)
        obs = random_obs(cfg, rng, batch=1)
        s = make_schedule(1, 1e-6, 1e-6)
        seed_rng = np.random.default_rng(7)
        out = sample_actions(head, obs, s, seed_rng, batch=1)
        ref_rng = np.random.default_rng(7)
        a1 = ref_rng.standard_normal((1, cfg.horizon, cfg.action_dim))
        eps_hat = head(a1.astype(np.float32), np.array([1]), obs).data
        ab = s.alpha_bars[0]
        x0 = (a1 - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
        np.testing.assert_allclose(out, np.clip(x0, -1, 1), atol=1e-6)

    def _fit_distribution(self, targets, seed, steps=800):
        """Train a tiny unconditional head on fixed 1-D action targets."""
        cfg = toy_config(action_dim=1, horizon=1, exec_horizon=1, head_layers=1)
        head = make_head(cfg, seed=seed)
        obs = tc.constant(np.zeros((len(targets), cfg.obs_tokens, cfg.d), dtype=np.float32))
        a0 = np.asarray(targets, dtype=np.float64).reshape(-1, 1, 1)
        s = make_schedule(100, 1e-4, 0.02)
        opt = AdamW(head.params(), lr=1e-3, weight_decay=1e-4)
        lrng = np.random.default_rng(seed + 1)
        for _ in range(steps):
            opt.zero_grad()
            loss = diffusion_loss(head, obs, a0, s, lrng)
            loss.backward()
            opt.step()
        return head, s, cfg

    def test_point_mass_fit(self):
        c = 0.5
        head, s, cfg = self._fit_distribution([c] * 16, seed=11)
        obs = tc.constant(np.zeros((1000, cfg.obs_tokens, cfg.d), dtype=np.float32))
        samples = sample_actions(head, obs, s, np.random.default_rng(12), batch=1000)
        assert abs(samples.mean() - c) < 0.05
        assert np.abs(samples - c).mean() < 0.05

    def test_two_mode_fit_is_bimodal(self):
        targets = [-0.5, 0.5] * 8
        head, s, cfg = self._fit_distribution(targets, seed=13, steps=2000)
        obs = tc.constant(np.zeros((1000, cfg.obs_tokens, cfg.d), dtype=np.float32))
        samples = sample_actions(head, obs, s, np.random.default_rng(14), batch=1000).reshape(-1)
        hi = samples > 0
        ratio = hi.mean()
        assert 0.3 <= ratio <= 0.7
        # samples concentrate near the two modes
        assert np.abs(samples[hi] - 0.5).mean() < 0.1
        assert np.abs(samples[~hi] + 0.5).mean() < 0.1


class TestFullPipelineGradient:
    def test_grad_check_full_forward_and_loss(self, rng):
        cfg = toy_config()
        policy = Policy(cfg, seed=0)
        # rebuild at float64 for finite differences
        enc = FmtEncoder(cfg, np.random.default_rng(0), dtype=np.float64)
        head = NoisePredictor(cfg, np.random.default_rng(1), dtype=np.float64)
        images = rng.uniform(size=(2, cfg.cameras, cfg.t_img, 16, 16))
        ft = rng.normal(size=(2, cfg.ft_raw_len, 6))
        a0 = rng.uniform(-1, 1, size=(2, cfg.horizon, cfg.action_dim))
        s = make_schedule(10)
        loss_rng_state = np.random.default_rng(2).bit_generator.state

        def fn():
            lrng = np.random.default_rng(2)
            lrng.bit_generator.state = loss_rng_state
            obs = enc(images, ft)
            return diffusion_loss(head, obs, a0, s, lrng)

        params = {**enc.params(), **head.params()}
        err = tc.grad_check(fn, params, h=1e-5, samples_per_tensor=2, rng=np.random.default_rng(3))
        assert err < 1e-4

    def test_all_params_nonzero_grad(self, rng):
        cfg = toy_config()
        enc = FmtEncoder(cfg, np.random.default_rng(4), dtype=np.float64)
        head = NoisePredictor(cfg, np.random.default_rng(5), dtype=np.float64)
        images = rng.uniform(size=(4, cfg.cameras, cfg.t_img, 16, 16))
        ft = rng.normal(size=(4, cfg.ft_raw_len, 6))
        a0 = rng.uniform(-1, 1, size=(4, cfg.horizon, cfg.action_dim))
        s = make_schedule(10)
        obs = enc(images, ft)
        loss = diffusion_loss(head, obs, a0, s, np.random.default_rng(6))
        loss.backward()
        for name, p in {**enc.params(), **head.params()}.items():
            assert p.grad is not None and np.abs(p.grad).max() > 0, f"dead parameter {name}"
