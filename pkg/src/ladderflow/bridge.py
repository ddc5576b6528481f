"""The ladder bridge: learnable queries, the layer tap schedule, and the
per-layer two-layer connectors that turn tapped query states into the
diffusion tower's per-layer condition tokens.

Tap schedule: DiT layer i (1-based) reads the tower's layer m-n+i, so the
last DiT layer reads the final tower layer. The final-layer-only ablation
reroutes every connector to layer m while keeping the architecture
identical, which isolates the value of multi-depth taps.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .layers import Linear, Module
from .mllm import ConfigError, MllmConfig, PromptSequence, ToyMllm
from .rng import stream

BRIDGE_MODES = ("ladder", "final_layer_only", "shared_connector")


class QuerySet(Module):
    """N trainable query embeddings of the tower's width."""

    def __init__(self, n_queries: int, d: int, seed: int = 0, init_std: float = 0.02):
        if n_queries < 1:
            raise ConfigError("need at least one query")
        rng = stream(seed, "queries-init")
        self.q = Param(rng.normal(0, init_std, (n_queries, d)), "bridge.queries")

    @property
    def n(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class TapSchedule:
    m: int
    n: int
    pairs: tuple  # ((dit_layer, mllm_layer), ...), both 1-based

    @property
    def mllm_layers(self) -> list:
        return [ml for _, ml in self.pairs]


def tap_schedule(m: int, n: int) -> TapSchedule:
    if n < 1:
        raise ConfigError("need at least one DiT layer")
    if m < n:
        raise ConfigError(
            f"tower depth m={m} must satisfy m >= n (n={n}): each DiT layer i "
            f"taps tower layer m-n+i, which requires at least n tower layers")
    pairs = tuple((i, m - n + i) for i in range(1, n + 1))
    return TapSchedule(m, n, pairs)


class Connector(Module):
    """Exactly two affine layers with a GELU between; maps tower-width
    query states to DiT-width condition tokens.

    The second layer starts at zero so conditions begin as a constant and
    the DiT trains from an unconditional starting point.
    """

    def __init__(self, d_mllm: int, d_hid: int, d_dit: int, name: str, rng):
        self.fc1 = Linear(d_mllm, d_hid, f"{name}.fc1", rng)
        self.fc2 = Linear(d_hid, d_dit, f"{name}.fc2", rng, zero_init=True)

    def __call__(self, h: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(h)))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())


@dataclass
class ConditionStack:
    """Ordered per-DiT-layer conditions; independent of diffusion time and
    of the denoised state, so it is built once and cached across steps."""
    entries: list        # n tensors [B,N,d_dit]
    source_layers: list  # n tower layer indices
    prompt_digest: str

    def __len__(self):
        return len(self.entries)

    def data(self) -> list:
        return [e.data for e in self.entries]


def prompt_digest(prompts: list) -> str:
    h = hashlib.sha256()
    for p in prompts:
        h.update(bytes([len(p.text_ids)]))
        h.update(np.asarray(p.text_ids, dtype=np.int64).tobytes())
        h.update(b"img" if p.has_image else b"---")
        if p.has_image:
            h.update(np.ascontiguousarray(p.image, dtype=np.float32).tobytes())
    return h.hexdigest()


class LadderBridge(Module):
    def __init__(self, mllm_cfg: MllmConfig, n_dit: int, d_dit: int,
                 n_queries: int = 16, d_hid: int = 0, mode: str = "ladder",
                 seed: int = 0, init_std: float = 0.02):
        if mode not in BRIDGE_MODES:
            raise ConfigError(f"unknown bridge mode {mode!r}; choose from {BRIDGE_MODES}")
        self.mode = mode
        self.schedule = tap_schedule(mllm_cfg.m, n_dit)
        self.queries = QuerySet(n_queries, mllm_cfg.d_mllm, seed=seed, init_std=init_std)
        d_hid = d_hid or mllm_cfg.d_mllm
        rng = stream(seed, "bridge-init")
        n_conn = 1 if mode == "shared_connector" else n_dit
        self.connectors = [Connector(mllm_cfg.d_mllm, d_hid, d_dit,
                                     f"bridge.connector{i}", rng)
                           for i in range(n_conn)]

    def connector_for(self, i: int) -> Connector:
        """Connector feeding DiT layer i (1-based)."""
        return self.connectors[0] if self.mode == "shared_connector" else self.connectors[i - 1]

    def taps(self) -> list:
        if self.mode == "final_layer_only":
            return [self.schedule.m]
        return self.schedule.mllm_layers

    def build_condition_stack(self, mllm: ToyMllm, prompts: list) -> ConditionStack:
        """One tower forward, then one connector application per DiT layer."""
        embedded = mllm.embed_prompt(prompts, self.queries.q)
        states = mllm.forward_collect(embedded, self.taps(), self.queries.n)
        entries, sources = [], []
        for i, mllm_layer in self.schedule.pairs:
            source = self.schedule.m if self.mode == "final_layer_only" else mllm_layer
            entries.append(self.connector_for(i)(states[source]))
            sources.append(source)
        return ConditionStack(entries, sources, prompt_digest(prompts))

    def param_count(self) -> int:
        return sum(p.data.size for c in self.connectors for p in c.params())
