"""Layer zoo shared by the frozen language tower and the diffusion tower."""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor


class Module:
    """Minimal parameter container; walks attributes in definition order."""

    def params(self) -> list[Param]:
        out = []
        for value in vars(self).values():
            out.extend(_collect(value))
        return out

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def freeze(self):
        for p in self.params():
            p.freeze()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(p.name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _collect(value):
    if isinstance(value, Param):
        return [value]
    if isinstance(value, Module):
        return value.params()
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_collect(v))
        return out
    return []


class Linear(Module):
    def __init__(self, d_in, d_out, name, rng, init_std=None, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            std = init_std if init_std is not None else d_in ** -0.5
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.w = Param(w, f"{name}.w")
        self.b = Param(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d, name, eps=1e-5):
        self.gain = Param(np.ones(d), f"{name}.gain")
        self.bias = Param(np.zeros(d), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    def __init__(self, d, d_hidden, name, rng):
        self.fc1 = Linear(d, d_hidden, f"{name}.fc1", rng)
        self.fc2 = Linear(d_hidden, d, f"{name}.fc2", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B,S,D] -> [B,H,S,D/H]"""
    b, s, d = x.shape
    return ad.transpose(ad.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B,H,S,d] -> [B,S,H*d]"""
    b, h, s, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, h * d))


class SelfAttention(Module):
    def __init__(self, d, heads, name, rng):
        if d % heads:
            raise ad.ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, f"{name}.qkv", rng)
        self.proj = Linear(d, d, f"{name}.proj", rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = split_heads(ad.narrow(qkv, -1, 0, d), self.heads)
        k = split_heads(ad.narrow(qkv, -1, d, d), self.heads)
        v = split_heads(ad.narrow(qkv, -1, 2 * d, d), self.heads)
        return self.proj(merge_heads(ad.attention(q, k, v, mask)))


class CrossAttention(Module):
    def __init__(self, d, heads, name, rng):
        if d % heads:
            raise ad.ShapeError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, f"{name}.q", rng)
        self.kv = Linear(d, 2 * d, f"{name}.kv", rng)
        self.proj = Linear(d, d, f"{name}.proj", rng)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        d = x.shape[-1]
        q = split_heads(self.q(x), self.heads)
        kv = self.kv(ctx)
        k = split_heads(ad.narrow(kv, -1, 0, d), self.heads)
        v = split_heads(ad.narrow(kv, -1, d, d), self.heads)
        return self.proj(merge_heads(ad.attention(q, k, v)))


class DecoderBlock(Module):
    """Pre-norm: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, d, heads, d_hidden, name, rng):
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = SelfAttention(d, heads, f"{name}.attn", rng)
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.mlp = Mlp(d, d_hidden, f"{name}.mlp", rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), mask))
        return ad.add(x, self.mlp(self.ln2(x)))


def causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))
