"""Observation encoder fusing dual-camera image tokens with force-torque tokens.

Images become patch tokens through a small trainable patch encoder; the wrench
window becomes a short token sequence through a strided 1-D conv stack. Three
learnable embedding families tag the tokens: spatial position within an image,
per-timestep position shared across modalities (resampled by linear
interpolation so streams with different rates land on one temporal coordinate),
and token source. The two streams then exchange information through
bi-directional cross-attention and are fused into a single observation token
sequence. Every piece can be disabled by a config flag for ablations without
changing output shapes (except the force-free variant, which drops the force
tokens entirely).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tc
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class FmtConfig:
    d: int = 64
    heads: int = 4
    image_hw: int = 32
    patch: int = 8
    channels: int = 1
    cameras: int = 2
    t_img: int = 2
    t_ft: int = 8
    ft_dim: int = 6
    ft_raw_len: int = 32
    cross_layers: int = 1
    ffn_mult: int = 2
    action_dim: int = 6
    horizon: int = 8
    exec_horizon: int = 4
    head_layers: int = 2
    step_embed_dim: int = 64
    obs_frame_stride: int = 4
    use_ft: bool = True
    no_freq_embed: bool = False
    no_modality_embed: bool = False
    no_cross_attention: bool = False

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"model width {self.d} not divisible by {self.heads} heads")
        if self.image_hw % self.patch != 0:
            raise ValueError(f"image size {self.image_hw} not divisible by patch {self.patch}")
        if self.ft_raw_len != 4 * self.t_ft:
            # two stride-2 convs compress the raw window 4x onto the token axis
            raise ValueError(f"ft_raw_len must be 4*t_ft, got {self.ft_raw_len} vs t_ft={self.t_ft}")
        if not 1 <= self.exec_horizon <= self.horizon:
            raise ValueError("exec_horizon must lie within the action horizon")

    @property
    def l_tokens(self) -> int:
        return (self.image_hw // self.patch) ** 2

    @property
    def visual_count(self) -> int:
        return self.cameras * self.t_img * self.l_tokens

    @property
    def obs_tokens(self) -> int:
        return self.visual_count + (self.t_ft if self.use_ft else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "FmtConfig":
        return FmtConfig(**d)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32):
        self.w = tc.xavier_uniform(rng, d_in, d_out, dtype=dtype)
        self.b = tc.zeros_param((d_out,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.add(tc.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, d: int, dtype=np.float32):
        self.gain = tc.ones_param((d,), dtype=dtype)
        self.bias = tc.zeros_param((d,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class Mlp:
    def __init__(self, rng, d: int, hidden: int, dtype=np.float32):
        self.fc1 = Linear(rng, d, hidden, dtype)
        self.fc2 = Linear(rng, hidden, d, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; mask is additive."""
    d_head = q.shape[-1]
    scores = tc.scale(tc.matmul(q, tc.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))), 1.0 / np.sqrt(d_head))
    if mask is not None:
        scores = tc.add(scores, tc.constant(mask, dtype=scores.dtype))
    return tc.matmul(tc.softmax_rows(scores), v)


class MultiHeadAttention:
    def __init__(self, rng, d: int, heads: int, dtype=np.float32):
        self.d, self.heads = d, heads
        self.wq = Linear(rng, d, d, dtype)
        self.wk = Linear(rng, d, d, dtype)
        self.wv = Linear(rng, d, d, dtype)
        self.wo = Linear(rng, d, d, dtype)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, nq, d = q_tokens.shape
        if kv_tokens.shape[0] != B or kv_tokens.shape[2] != d:
            raise tc.ShapeError(
                f"attention: query {q_tokens.shape} and key/value {kv_tokens.shape} incompatible"
            )
        nk = kv_tokens.shape[1]
        h, dh = self.heads, d // self.heads

        def split(x: Tensor, n: int) -> Tensor:
            return tc.transpose(tc.reshape(x, (B, n, h, dh)), (0, 2, 1, 3))

        q = split(self.wq(q_tokens), nq)
        k = split(self.wk(kv_tokens), nk)
        v = split(self.wv(kv_tokens), nk)
        out = scaled_dot_attention(q, k, v, mask)
        out = tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (B, nq, d))
        return self.wo(out)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, lin in (("q", self.wq), ("k", self.wk), ("v", self.wv), ("o", self.wo)):
            out.update(lin.params(f"{prefix}.{name}"))
        return out


class CrossAttentionBlock:
    """Symmetric bi-directional cross-attention with per-stream feed-forward.

    Both directions read the same pre-attention inputs; residual connections
    and pre-normalization throughout.
    """

    def __init__(self, rng, d: int, heads: int, ffn_mult: int, dtype=np.float32):
        self.ln_img = LayerNorm(d, dtype)
        self.ln_ft = LayerNorm(d, dtype)
        self.attn_img = MultiHeadAttention(rng, d, heads, dtype)   # image queries, force keys/values
        self.attn_ft = MultiHeadAttention(rng, d, heads, dtype)    # force queries, image keys/values
        self.ln_img2 = LayerNorm(d, dtype)
        self.ln_ft2 = LayerNorm(d, dtype)
        self.ffn_img = Mlp(rng, d, ffn_mult * d, dtype)
        self.ffn_ft = Mlp(rng, d, ffn_mult * d, dtype)

    def __call__(self, img: Tensor, ft: Tensor) -> tuple[Tensor, Tensor]:
        img_n = self.ln_img(img)
        ft_n = self.ln_ft(ft)
        img2 = tc.add(img, self.attn_img(img_n, ft_n))
        ft2 = tc.add(ft, self.attn_ft(ft_n, img_n))
        img2 = tc.add(img2, self.ffn_img(self.ln_img2(img2)))
        ft2 = tc.add(ft2, self.ffn_ft(self.ln_ft2(ft2)))
        return img2, ft2

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.ln_img.params(f"{prefix}.ln_img"))
        out.update(self.ln_ft.params(f"{prefix}.ln_ft"))
        out.update(self.attn_img.params(f"{prefix}.attn_img"))
        out.update(self.attn_ft.params(f"{prefix}.attn_ft"))
        out.update(self.ln_img2.params(f"{prefix}.ln_img2"))
        out.update(self.ln_ft2.params(f"{prefix}.ln_ft2"))
        out.update(self.ffn_img.params(f"{prefix}.ffn_img"))
        out.update(self.ffn_ft.params(f"{prefix}.ffn_ft"))
        return out


class PatchEncoder:
    """Non-overlapping patch projection plus two residual MLP blocks."""

    def __init__(self, rng, cfg: FmtConfig, dtype=np.float32):
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.proj = Linear(rng, patch_dim, cfg.d, dtype)
        self.blocks = []
        for _ in range(2):
            self.blocks.append((LayerNorm(cfg.d, dtype), Mlp(rng, cfg.d, cfg.ffn_mult * cfg.d, dtype)))

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, N, H, W[, C]) -> (B, N, L, patch*patch*C), row-major patch order."""
        cfg = self.cfg
        if images.ndim == 4:
            images = images[..., None]
        B, N, H, W, C = images.shape
        g = H // cfg.patch
        x = images.reshape(B, N, g, cfg.patch, g, cfg.patch, C)
        x = x.transpose(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, N, g * g, cfg.patch * cfg.patch * C)

    def __call__(self, images: np.ndarray, dtype=np.float32) -> Tensor:
        patches = tc.constant(self.patchify(images), dtype=dtype)
        tokens = self.proj(patches)
        for ln, mlp in self.blocks:
            tokens = tc.add(tokens, mlp(ln(tokens)))
        return tokens

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.proj.params(f"{prefix}.proj")
        for i, (ln, mlp) in enumerate(self.blocks):
            out.update(ln.params(f"{prefix}.block{i}.ln"))
            out.update(mlp.params(f"{prefix}.block{i}.mlp"))
        return out


class FtEncoder:
    """Strided 1-D conv stack over the wrench window; output length = t_ft."""

    def __init__(self, rng, cfg: FmtConfig, dtype=np.float32):
        self.cfg = cfg
        c_mid = max(cfg.d // 2, 8)
        k = 5
        self.w1 = tc.xavier_uniform(rng, cfg.ft_dim * k, c_mid * k, shape=(c_mid, cfg.ft_dim, k), dtype=dtype)
        self.b1 = tc.zeros_param((c_mid,), dtype=dtype)
        self.w2 = tc.xavier_uniform(rng, c_mid * k, cfg.d * k, shape=(cfg.d, c_mid, k), dtype=dtype)
        self.b2 = tc.zeros_param((cfg.d,), dtype=dtype)
        self.proj = Linear(rng, cfg.d, cfg.d, dtype)

    def __call__(self, block: np.ndarray, dtype=np.float32) -> Tensor:
        x = tc.constant(np.swapaxes(block, 1, 2), dtype=dtype)  # (B, 6, raw)
        h = tc.gelu(tc.conv1d(x, self.w1, self.b1, stride=2, padding=2))
        h = tc.gelu(tc.conv1d(h, self.w2, self.b2, stride=2, padding=2))
        tokens = tc.transpose(h, (0, 2, 1))  # (B, t_ft, d)
        return self.proj(tokens)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.conv1.w": self.w1,
            f"{prefix}.conv1.b": self.b1,
            f"{prefix}.conv2.w": self.w2,
            f"{prefix}.conv2.b": self.b2,
        }
        out.update(self.proj.params(f"{prefix}.proj"))
        return out


class FmtEncoder:
    """Full observation encoder: tokens -> embeddings -> cross-attention -> fusion."""

    def __init__(self, cfg: FmtConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.patch_enc = PatchEncoder(rng, cfg, dtype)
        self.ft_enc = FtEncoder(rng, cfg, dtype) if cfg.use_ft else None
        self.e_spatial = tc.normal_embedding(rng, (cfg.l_tokens, cfg.d), dtype=dtype)
        self.e_freq = tc.normal_embedding(rng, (cfg.t_ft, cfg.d), dtype=dtype)
        self.e_cam = tc.normal_embedding(rng, (cfg.cameras, cfg.d), dtype=dtype)
        self.e_ft = tc.normal_embedding(rng, (1, cfg.d), dtype=dtype)
        self.cross = (
            [CrossAttentionBlock(rng, cfg.d, cfg.heads, cfg.ffn_mult, dtype) for _ in range(cfg.cross_layers)]
            if (cfg.use_ft and not cfg.no_cross_attention)
            else []
        )
        self.fuse_fc = Linear(rng, cfg.d, cfg.d, dtype)
        self.fuse_ln = LayerNorm(cfg.d, dtype)
        # token -> table row indices, fixed by the (camera, frame, patch) layout
        L, T, C = cfg.l_tokens, cfg.t_img, cfg.cameras
        self._spatial_idx = np.tile(np.arange(L), C * T)
        self._freq_idx = np.tile(np.repeat(np.arange(T), L), C)
        self._cam_idx = np.repeat(np.arange(C), T * L)

    def encode_visual(self, images: np.ndarray) -> Tensor:
        """images (B, cameras, t_img, H, W) -> embedded visual tokens (B, V, d)."""
        cfg = self.cfg
        B = images.shape[0]
        flat = images.reshape(B, cfg.cameras * cfg.t_img, cfg.image_hw, cfg.image_hw)
        tokens = self.patch_enc(flat, self.dtype)                       # (B, C*T, L, d)
        tokens = tc.reshape(tokens, (B, cfg.visual_count, cfg.d))       # camera-major, frame, patch
        tokens = tc.embedding_add(tokens, self.e_spatial, self._spatial_idx)
        if not cfg.no_freq_embed:
            freq_img = tc.linear_interpolate_rows(self.e_freq, cfg.t_img)
            tokens = tc.embedding_add(tokens, freq_img, self._freq_idx)
        if not cfg.no_modality_embed:
            tokens = tc.embedding_add(tokens, self.e_cam, self._cam_idx)
        return tokens

    def encode_ft(self, ft_block: np.ndarray) -> Tensor:
        """ft_block (B, ft_raw_len, 6) -> embedded force tokens (B, t_ft, d)."""
        cfg = self.cfg
        tokens = self.ft_enc(ft_block, self.dtype)
        if not cfg.no_freq_embed:
            tokens = tc.embedding_add(tokens, self.e_freq, np.arange(cfg.t_ft))
        if not cfg.no_modality_embed:
            tokens = tc.embedding_add(tokens, self.e_ft, np.zeros(cfg.t_ft, dtype=np.int64))
        return tokens

    def __call__(self, images: np.ndarray, ft_block: np.ndarray | None) -> Tensor:
        cfg = self.cfg
        visual = self.encode_visual(images)
        if cfg.use_ft:
            if ft_block is None:
                raise tc.ShapeError("config expects a force block but none was provided")
            ft = self.encode_ft(ft_block)
            for block in self.cross:
                visual, ft = block(visual, ft)
            fused = tc.concat([visual, ft], axis=1)
        else:
            fused = visual
        return self.fuse_ln(self.fuse_fc(fused))

    def params(self) -> dict[str, Tensor]:
        out = self.patch_enc.params("enc.patch")
        if self.ft_enc is not None:
            out.update(self.ft_enc.params("enc.ft"))
        out.update(
            {
                "enc.e_spatial": self.e_spatial,
                "enc.e_freq": self.e_freq,
                "enc.e_cam": self.e_cam,
                "enc.e_ft": self.e_ft,
            }
        )
        for i, block in enumerate(self.cross):
            out.update(block.params(f"enc.cross{i}"))
        out.update(self.fuse_fc.params("enc.fuse_fc"))
        out.update(self.fuse_ln.params("enc.fuse_ln"))
        return out
