"""Denoising diffusion action head conditioned on observation tokens.

The forward process mixes demonstration action sequences with Gaussian noise
according to a linear variance schedule; a small transformer decoder with
causal self-attention over action tokens and cross-attention to the
observation tokens predicts the injected noise. Sampling runs the standard
ancestral reverse loop from pure noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .model import FmtConfig, LayerNorm, Linear, Mlp, MultiHeadAttention, NEG_INF
from .tensor import Tensor


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray        # (K,), betas[k-1] is the step-k variance increment
    alphas: np.ndarray
    alpha_bars: np.ndarray   # cumulative products, alpha_bars[k-1] for step k

    @property
    def K(self) -> int:
        return len(self.betas)

    def alpha_bar(self, k) -> np.ndarray:
        """alpha_bar at step k with the k=0 convention alpha_bar_0 = 1."""
        k = np.asarray(k)
        if np.any(k < 0) or np.any(k > self.K):
            raise IndexError(f"step index out of range [0, {self.K}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[k]

    def to_dict(self) -> dict:
        return {"K": self.K, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule with cumulative alpha products."""
    if K < 1:
        raise ScheduleError(f"need K >= 1 denoising steps, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, K)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas, alphas, np.cumprod(alphas))


def forward_noise(a0: np.ndarray, k, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """a_k = sqrt(alpha_bar_k) a0 + sqrt(1 - alpha_bar_k) eps; k may be per-sample."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = schedule.alpha_bar(k)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (a0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(k: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos step embedding, (B,) -> (B, dim)."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DecoderLayer:
    def __init__(self, rng, d: int, heads: int, ffn_mult: int, dtype=np.float32):
        self.ln_self = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(rng, d, heads, dtype)
        self.ln_cross = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(rng, d, heads, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        self.ffn = Mlp(rng, d, ffn_mult * d, dtype)

    def __call__(self, x: Tensor, obs: Tensor, causal_mask: np.ndarray) -> Tensor:
        xn = self.ln_self(x)
        x = tc.add(x, self.self_attn(xn, xn, causal_mask))
        x = tc.add(x, self.cross_attn(self.ln_cross(x), obs))
        x = tc.add(x, self.ffn(self.ln_ffn(x)))
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.ln_self.params(f"{prefix}.ln_self"))
        out.update(self.self_attn.params(f"{prefix}.self"))
        out.update(self.ln_cross.params(f"{prefix}.ln_cross"))
        out.update(self.cross_attn.params(f"{prefix}.cross"))
        out.update(self.ln_ffn.params(f"{prefix}.ln_ffn"))
        out.update(self.ffn.params(f"{prefix}.ffn"))
        return out


class NoisePredictor:
    """Transformer decoder over noisy action tokens, conditioned on observations."""

    def __init__(self, cfg: FmtConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.d
        self.in_proj = Linear(rng, cfg.action_dim, d, dtype)
        self.e_pos = tc.normal_embedding(rng, (cfg.horizon, d), dtype=dtype)
        self.step_fc1 = Linear(rng, cfg.step_embed_dim, d, dtype)
        self.step_fc2 = Linear(rng, d, d, dtype)
        self.layers = [DecoderLayer(rng, d, cfg.heads, cfg.ffn_mult, dtype) for _ in range(cfg.head_layers)]
        self.ln_final = LayerNorm(d, dtype)
        self.out_proj = Linear(rng, d, cfg.action_dim, dtype)
        # strictly causal information flow: token i attends to j <= i
        H = cfg.horizon
        self.causal_mask = np.where(np.tril(np.ones((H, H), dtype=bool)), 0.0, NEG_INF)

    def __call__(self, a_k: np.ndarray, k: np.ndarray, obs: Tensor) -> Tensor:
        """(B, H, A) noisy actions, (B,) step indices -> (B, H, A) noise estimate."""
        cfg = self.cfg
        B = a_k.shape[0]
        if a_k.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise tc.ShapeError(f"actions must be (B, {cfg.horizon}, {cfg.action_dim}), got {a_k.shape}")
        x = self.in_proj(tc.constant(a_k, dtype=self.dtype))
        x = tc.embedding_add(x, self.e_pos, np.arange(cfg.horizon))
        s = sinusoidal_embedding(np.broadcast_to(np.asarray(k), (B,)), cfg.step_embed_dim)
        s = self.step_fc2(tc.gelu(self.step_fc1(tc.constant(s, dtype=self.dtype))))
        s = tc.reshape(s, (B, 1, cfg.d))
        x = tc.add(x, tc.concat([s] * cfg.horizon, axis=1))
        for layer in self.layers:
            x = layer(x, obs, self.causal_mask)
        return self.out_proj(self.ln_final(x))

    def params(self) -> dict[str, Tensor]:
        out = self.in_proj.params("head.in_proj")
        out["head.e_pos"] = self.e_pos
        out.update(self.step_fc1.params("head.step_fc1"))
        out.update(self.step_fc2.params("head.step_fc2"))
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"head.layer{i}"))
        out.update(self.ln_final.params("head.ln_final"))
        out.update(self.out_proj.params("head.out_proj"))
        return out


def noised_batch(
    a0: np.ndarray, schedule: DiffusionSchedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample per-element steps and noise; returns (a_k, ks, eps)."""
    ks = rng.integers(1, schedule.K + 1, size=a0.shape[0])
    eps = rng.standard_normal(a0.shape)
    return forward_noise(a0, ks, eps, schedule), ks, eps


def diffusion_loss(
    head: NoisePredictor,
    obs: Tensor,
    a0: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
) -> Tensor:
    """Noise-prediction MSE with per-sample uniform step indices."""
    a_k, ks, eps = noised_batch(a0, schedule, rng)
    eps_hat = head(a_k.astype(head.dtype), ks, obs)
    return tc.mse_loss(eps_hat, tc.constant(eps, dtype=head.dtype))


def sample_actions(
    head: NoisePredictor,
    obs: Tensor,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    batch: int,
) -> np.ndarray:
    """Ancestral reverse diffusion from pure noise; deterministic given the rng.

    Returns normalized actions clamped to [-1, 1], shape (batch, horizon, action_dim).
    """
    cfg = head.cfg
    a = rng.standard_normal((batch, cfg.horizon, cfg.action_dim))
    with tc.no_grad():
        for k in range(schedule.K, 0, -1):
            eps_hat = head(a.astype(head.dtype), np.full(batch, k), obs).data.astype(np.float64)
            alpha = schedule.alphas[k - 1]
            beta = schedule.betas[k - 1]
            ab = schedule.alpha_bars[k - 1]
            mean = (a - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
            if k > 1:
                ab_prev = schedule.alpha_bars[k - 2]
                sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
                a = mean + sigma * rng.standard_normal(a.shape)
            else:
                a = mean
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"sampler produced non-finite values at step {k}")
    return np.clip(a, -1.0, 1.0)
