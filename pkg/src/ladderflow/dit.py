"""Pixel-space diffusion transformer predicting flow velocity.

Each block is pre-norm residual: self-attention over patch tokens, then
cross-attention whose keys/values are that block's own condition entry,
then an MLP. Timestep enters as a sinusoidal embedding pushed through a
small MLP and added to every patch token; the output projection starts at
zero so the model predicts zero velocity at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .layers import CrossAttention, LayerNorm, Linear, Mlp, Module, SelfAttention
from .mllm import ConfigError
from .rng import stream


@dataclass
class DitConfig:
    n: int = 4
    d_dit: int = 64
    heads: int = 4
    img_side: int = 16
    patch: int = 4
    t_embed_dim: int = 32
    mlp_hidden: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))

    def validate(self) -> list:
        problems = []
        if self.n < 1:
            problems.append("dit: n must be >= 1")
        if self.d_dit % self.heads:
            problems.append(f"dit: d_dit={self.d_dit} not divisible by heads={self.heads}")
        if self.img_side % self.patch:
            problems.append(f"dit: img_side={self.img_side} not divisible by patch={self.patch}")
        if self.t_embed_dim % 2:
            problems.append("dit: t_embed_dim must be even")
        return problems

    @property
    def n_patches(self) -> int:
        return (self.img_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden or self.d_dit


def timestep_embed(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of t in [0,1]; distinct at f32 resolution on a
    1/1000 grid. t may be a scalar or a [B] vector; returns [B?, dim]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"timestep {t} outside [0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.multiply.outer(t * 1000.0, freqs)
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb.astype(dtype)


class DitBlock(Module):
    def __init__(self, d, heads, d_hidden, name, rng):
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = SelfAttention(d, heads, f"{name}.attn", rng)
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.cross = CrossAttention(d, heads, f"{name}.cross", rng)
        self.ln3 = LayerNorm(d, f"{name}.ln3")
        self.mlp = Mlp(d, d_hidden, f"{name}.mlp", rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x)))
        x = ad.add(x, self.cross(self.ln2(x), cond))
        return ad.add(x, self.mlp(self.ln3(x)))


class Dit(Module):
    def __init__(self, cfg: DitConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "dit-init")
        d = cfg.d_dit
        self.patch_in = Linear(cfg.patch_dim, d, "dit.patch_in", rng)
        self.pos_emb = Param(rng.normal(0, cfg.init_std, (cfg.n_patches, d)), "dit.pos_emb")
        self.t_fc1 = Linear(cfg.t_embed_dim, d, "dit.t_fc1", rng)
        self.t_fc2 = Linear(d, d, "dit.t_fc2", rng)
        self.blocks = [DitBlock(d, cfg.heads, cfg.mlp_width, f"dit.block{i}", rng)
                       for i in range(cfg.n)]
        self.final_ln = LayerNorm(d, "dit.final_ln")
        self.patch_out = Linear(d, cfg.patch_dim, "dit.patch_out", rng, zero_init=True)

    def patchify(self, img: Tensor) -> Tensor:
        """[B,H,W,3] -> [B,P,patch_dim]"""
        cfg = self.cfg
        b = img.shape[0]
        k = cfg.img_side // cfg.patch
        x = ad.reshape(img, (b, k, cfg.patch, k, cfg.patch, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, k * k, cfg.patch_dim))

    def unpatchify(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        b = x.shape[0]
        k = cfg.img_side // cfg.patch
        x = ad.reshape(x, (b, k, k, cfg.patch, cfg.patch, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, cfg.img_side, cfg.img_side, 3))

    def forward(self, x_t, t, stack, probe=None) -> Tensor:
        """x_t: [B,H,W,3] array or Tensor; t: scalar or [B]; stack: the
        per-layer conditions. probe, if given, receives each block's output
        (test hook for locality checks). Returns velocity [B,H,W,3]."""
        cfg = self.cfg
        if len(stack) != cfg.n:
            raise ConfigError(f"condition stack has {len(stack)} entries, "
                              f"DiT has n={cfg.n} layers")
        if not isinstance(x_t, Tensor):
            x_t = ad.tensor(np.asarray(x_t, dtype=ad.DEFAULT_DTYPE))
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        temb = self.t_fc2(ad.gelu(self.t_fc1(
            ad.tensor(timestep_embed(t, cfg.t_embed_dim, dtype=x_t.data.dtype)))))
        x = self.patch_in(self.patchify(x_t))
        x = ad.add(ad.add(x, self.pos_emb), ad.reshape(temb, (b, 1, cfg.d_dit)))
        for i, block in enumerate(self.blocks):
            cond = stack.entries[i] if hasattr(stack, "entries") else stack[i]
            if not isinstance(cond, Tensor):
                cond = ad.tensor(cond)
            x = block(x, cond)
            if probe is not None:
                probe.append(x.data.copy())
        return self.unpatchify(self.patch_out(self.final_ln(x)))
