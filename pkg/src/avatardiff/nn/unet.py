"""Noise-prediction UNet with decoupled conditioning.

Conditioning enters two ways, both inert at initialization:

* Gated cross-attention: every attention site attends to a learned null
  context; an extra attention branch over the condition tokens is added
  through a zero-initialized per-site gate. With the gate at zero (or with no
  condition tokens passed) the net IS the unconditional net, bit for bit.
* Spatial control branch: a copy of the encoder reads the channel-wise
  concatenation of the noisy input and the spatial condition maps; its
  per-level features pass through zero-initialized 1x1 convolutions and are
  added to the decoder-bound skips, so it too starts as an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .layers import Conv2d, GroupNorm, Linear, Module, Parameter


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3
    out_channels: int = 3
    widths: tuple = (8, 16, 32)
    t_dim: int = 64
    ctx_dim: int = 256
    heads: int = 4
    groups: int = 4
    null_tokens: int = 4

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValueError("widths must have three levels")
        if any(w % self.heads for w in self.widths[2:]):
            raise ValueError("attention width must be divisible by heads")
        if any(w % self.groups for w in self.widths):
            raise ValueError("widths must be divisible by norm groups")


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, t_dim: int, groups: int, rng):
        self.norm1 = GroupNorm(cin, groups)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.t_proj = Linear(t_dim, cout, rng)
        self.norm2 = GroupNorm(cout, groups)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        n = x.shape[0]
        h = self.conv1(self.norm1(x).silu())
        h = h + self.t_proj(temb.silu()).reshape(n, 1, 1, h.shape[3])
        h = self.conv2(self.norm2(h).silu())
        return h + (self.skip(x) if self.skip else x)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    # (..., T, D) -> (..., heads, T, D/heads)
    *lead, tok, d = t.shape
    t = t.reshape(*lead, tok, heads, d // heads)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return t.transpose(*axes)


class GatedCrossAttention(Module):
    """Attention over a learned null context plus a zero-gated condition branch."""

    def __init__(self, channels: int, ctx_dim: int, heads: int, groups: int,
                 null_tokens: int, rng):
        self.heads = heads
        self.norm = GroupNorm(channels, groups)
        self.null_ctx = Parameter(rng.normal(0.0, 0.02, (null_tokens, ctx_dim)))
        self.q = Linear(channels, channels, rng)
        self.k_null = Linear(ctx_dim, channels, rng)
        self.v_null = Linear(ctx_dim, channels, rng)
        self.k_cond = Linear(ctx_dim, channels, rng)
        self.v_cond = Linear(ctx_dim, channels, rng)
        self.out = Linear(channels, channels, rng)
        self.gate = Parameter(np.zeros(1))

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ k.transpose(*range(k.data.ndim - 2), k.data.ndim - 1, k.data.ndim - 2)) * scale
        return scores.softmax() @ v

    def __call__(self, x: Tensor, f: Tensor | None) -> Tensor:
        n, h, w, c = x.shape
        tokens = self.norm(x).reshape(n, h * w, c)
        q = _split_heads(self.q(tokens), self.heads)            # (n, hd, T, d)
        k0 = _split_heads(self.k_null(self.null_ctx), self.heads)   # (hd, S0, d)
        v0 = _split_heads(self.v_null(self.null_ctx), self.heads)
        attn = self._attend(q, k0, v0)
        if f is not None:
            kc = _split_heads(self.k_cond(f), self.heads)       # (n, hd, S, d)
            vc = _split_heads(self.v_cond(f), self.heads)
            attn = attn + self.gate * self._attend(q, kc, vc)
        merged = attn.transpose(0, 2, 1, 3).reshape(n, h * w, c)
        return x + self.out(merged).reshape(n, h, w, c)


class SelfAttention(Module):
    def __init__(self, channels: int, heads: int, groups: int, rng):
        self.heads = heads
        self.norm = GroupNorm(channels, groups)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        tokens = self.norm(x).reshape(n, h * w, c)
        q = _split_heads(self.q(tokens), self.heads)
        k = _split_heads(self.k(tokens), self.heads)
        v = _split_heads(self.v(tokens), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = scores.softmax() @ v
        merged = attn.transpose(0, 2, 1, 3).reshape(n, h * w, c)
        return x + self.out(merged).reshape(n, h, w, c)


class _Encoder(Module):
    """Shared trunk shape for the main net and the control branch."""

    def __init__(self, in_channels: int, cfg: DenoiserConfig, rng):
        w0, w1, w2 = cfg.widths
        self.conv_in = Conv2d(in_channels, w0, 3, rng)
        self.res0 = ResBlock(w0, w0, cfg.t_dim, cfg.groups, rng)
        self.down1 = Conv2d(w0, w1, 3, rng, stride=2)
        self.res1 = ResBlock(w1, w1, cfg.t_dim, cfg.groups, rng)
        self.down2 = Conv2d(w1, w2, 3, rng, stride=2)
        self.res2 = ResBlock(w2, w2, cfg.t_dim, cfg.groups, rng)
        self.res_mid = ResBlock(w2, w2, cfg.t_dim, cfg.groups, rng)

    def __call__(self, x: Tensor, temb: Tensor):
        s0 = self.res0(self.conv_in(x), temb)
        s1 = self.res1(self.down1(s0), temb)
        s2 = self.res2(self.down2(s1), temb)
        return s0, s1, s2


class ControlBranch(Module):
    """Encoder copy over concat(x_t, spatial condition), zero-gated per level."""

    def __init__(self, cond_channels: int, cfg: DenoiserConfig, rng):
        w0, w1, w2 = cfg.widths
        self.encoder = _Encoder(cfg.in_channels + cond_channels, cfg, rng)
        self.zero0 = Conv2d(w0, w0, 1, rng, zero=True)
        self.zero1 = Conv2d(w1, w1, 1, rng, zero=True)
        self.zero2 = Conv2d(w2, w2, 1, rng, zero=True)
        self.zero_mid = Conv2d(w2, w2, 1, rng, zero=True)

    def __call__(self, x: Tensor, z: Tensor, temb: Tensor):
        s0, s1, s2 = self.encoder(concat([x, z], axis=-1), temb)
        mid = self.encoder.res_mid(s2, temb)
        return self.zero0(s0), self.zero1(s1), self.zero2(s2), self.zero_mid(mid)


class DenoiserNet(Module):
    """Predicts the noise content of x_t given timestep and optional conditions."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        self.t1 = Linear(cfg.t_dim, cfg.t_dim, rng)
        self.t2 = Linear(cfg.t_dim, cfg.t_dim, rng)
        self.encoder = _Encoder(cfg.in_channels, cfg, rng)
        self.attn2 = GatedCrossAttention(w2, cfg.ctx_dim, cfg.heads, cfg.groups,
                                         cfg.null_tokens, rng)
        self.self_mid = SelfAttention(w2, cfg.heads, cfg.groups, rng)
        self.attn_mid = GatedCrossAttention(w2, cfg.ctx_dim, cfg.heads, cfg.groups,
                                            cfg.null_tokens, rng)
        self.res_mid2 = ResBlock(w2, w2, cfg.t_dim, cfg.groups, rng)
        self.res_d2 = ResBlock(w2 + w2, w2, cfg.t_dim, cfg.groups, rng)
        self.attn_d2 = GatedCrossAttention(w2, cfg.ctx_dim, cfg.heads, cfg.groups,
                                           cfg.null_tokens, rng)
        self.up1 = Conv2d(w2, w1, 3, rng)
        self.res_d1 = ResBlock(w1 + w1, w1, cfg.t_dim, cfg.groups, rng)
        self.up0 = Conv2d(w1, w0, 3, rng)
        self.res_d0 = ResBlock(w0 + w0, w0, cfg.t_dim, cfg.groups, rng)
        self.norm_out = GroupNorm(w0, cfg.groups)
        self.conv_out = Conv2d(w0, cfg.out_channels, 3, rng, zero=True)

    def time_embedding(self, t: np.ndarray, dtype=np.float32) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self.cfg.t_dim, dtype))
        return self.t2(self.t1(emb).silu())

    def __call__(self, x: Tensor, temb: Tensor, f: Tensor | None = None,
                 control=None) -> Tensor:
        s0, s1, s2 = self.encoder(x, temb)
        s2 = self.attn2(s2, f)
        mid = self.encoder.res_mid(s2, temb)
        if control is not None:
            c0, c1, c2, c_mid = control
            s0, s1, s2, mid = s0 + c0, s1 + c1, s2 + c2, mid + c_mid
        h = self.self_mid(mid)
        h = self.attn_mid(h, f)
        h = self.res_mid2(h, temb)
        h = self.res_d2(concat([h, s2], axis=-1), temb)
        h = self.attn_d2(h, f)
        h = self.up1(h.upsample2x())
        h = self.res_d1(concat([h, s1], axis=-1), temb)
        h = self.up0(h.upsample2x())
        h = self.res_d0(concat([h, s0], axis=-1), temb)
        return self.conv_out(self.norm_out(h).silu())
