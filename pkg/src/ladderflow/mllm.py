"""Frozen decoder-style multimodal tower.

Consumes [padded text tokens | image patches | learnable queries] under a
causal mask (queries sit last so they can read the whole prompt) and
exposes the query positions' hidden states after any requested subset of
its blocks. Hidden states are taken at block output, after the final
residual addition. An optional toy pretraining pass (next-token loss over
the caption grammar) runs before the weights are frozen; a random-frozen
tower is a supported ablation mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bench
from .autodiff import Param, Tensor
from .layers import DecoderBlock, LayerNorm, Linear, Module, causal_mask
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass
class MllmConfig:
    m: int = 8                 # layer count
    d_mllm: int = 128
    heads: int = 4
    vocab: int = len(bench.VOCAB)
    max_text: int = 8          # text tokens are always padded to this length
    patch: int = 8
    img_side: int = 16
    max_seq: int = 64
    mlp_hidden: int = 0        # 0 -> d_mllm
    init_std: float = 0.02

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))

    def validate(self) -> list:
        problems = []
        if self.m < 1:
            problems.append("mllm: m must be >= 1")
        if self.d_mllm % self.heads:
            problems.append(f"mllm: d_mllm={self.d_mllm} not divisible by heads={self.heads}")
        if self.img_side % self.patch:
            problems.append(f"mllm: img_side={self.img_side} not divisible by patch={self.patch}")
        return problems

    @property
    def n_patches(self) -> int:
        return (self.img_side // self.patch) ** 2

    @property
    def mlp_width(self) -> int:
        return self.mlp_hidden or self.d_mllm


@dataclass
class PromptSequence:
    """One prompt: padded text ids, optional [0,1] image, per-position tags."""
    text_ids: list
    image: np.ndarray | None = None
    layout: list = field(default_factory=list)

    @property
    def has_image(self) -> bool:
        return self.image is not None


def make_prompt(cfg: MllmConfig, text_ids, image=None) -> PromptSequence:
    """Pad text to cfg.max_text and tag positions. Queries are appended by
    the forward pass; their positions are tagged here for bookkeeping."""
    text_ids = list(text_ids)
    for tid in text_ids:
        if not 0 <= tid < cfg.vocab:
            raise ConfigError(f"token id {tid} out of vocabulary (size {cfg.vocab})")
    if len(text_ids) > cfg.max_text:
        raise ConfigError(f"text length {len(text_ids)} exceeds max_text={cfg.max_text}")
    padded = text_ids + [bench.PAD_ID] * (cfg.max_text - len(text_ids))
    layout = ["text"] * cfg.max_text
    if image is not None:
        image = np.asarray(image, dtype=np.float32)
        if image.shape != (cfg.img_side, cfg.img_side, 3):
            raise ConfigError(f"image shape {image.shape} does not match "
                              f"({cfg.img_side},{cfg.img_side},3)")
        layout += ["image-patch"] * cfg.n_patches
    return PromptSequence(padded, image, layout)


def null_prompt(cfg: MllmConfig, like: PromptSequence) -> PromptSequence:
    """Empty prompt with the same layout (all-pad text, zero image)."""
    image = np.zeros_like(like.image) if like.has_image else None
    return make_prompt(cfg, [], image)


def drop_text_prompt(cfg: MllmConfig, like: PromptSequence) -> PromptSequence:
    """Same prompt with the text blanked to all-pad (image kept)."""
    return make_prompt(cfg, [], like.image if like.has_image else None)


def drop_image_prompt(cfg: MllmConfig, like: PromptSequence) -> PromptSequence:
    """Same prompt with the image zeroed (text kept, layout unchanged)."""
    image = np.zeros_like(like.image) if like.has_image else None
    return make_prompt(cfg, like.text_ids, image)


def _patchify_np(img: np.ndarray, patch: int) -> np.ndarray:
    side = img.shape[0]
    k = side // patch
    return (img.reshape(k, patch, k, patch, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(k * k, patch * patch * 3))


class ToyMllm(Module):
    def __init__(self, cfg: MllmConfig, seed: int = 0):
        self.cfg = cfg
        rng = stream(seed, "mllm-init")
        d = cfg.d_mllm
        self.tok_emb = Param(rng.normal(0, cfg.init_std, (cfg.vocab, d)), "mllm.tok_emb")
        self.pos_emb = Param(rng.normal(0, cfg.init_std, (cfg.max_seq, d)), "mllm.pos_emb")
        self.patch_proj = Linear(cfg.patch * cfg.patch * 3, d, "mllm.patch_proj", rng)
        self.blocks = [DecoderBlock(d, cfg.heads, cfg.mlp_width, f"mllm.block{i}", rng)
                       for i in range(cfg.m)]
        self.final_ln = LayerNorm(d, "mllm.final_ln")
        self.lm_head = Linear(d, cfg.vocab, "mllm.lm_head", rng)

    # -- prompt embedding -------------------------------------------------
    def embed_prompt(self, prompts: list, queries: Tensor) -> Tensor:
        """[B prompts with identical layout] + queries [N,D] -> [B,S,D]."""
        cfg = self.cfg
        layouts = {tuple(p.layout) for p in prompts}
        if len(layouts) != 1:
            raise ConfigError("all prompts in a batch must share one layout")
        b = len(prompts)
        n_q = queries.shape[0]
        ids = np.array([p.text_ids for p in prompts], dtype=np.int64)
        parts = [ad.gather_rows(self.tok_emb, ids)]
        if prompts[0].has_image:
            patches = np.stack([_patchify_np(p.image, cfg.patch) for p in prompts])
            parts.append(self.patch_proj(ad.tensor(patches)))
        q = ad.reshape(queries, (1, n_q, cfg.d_mllm))
        parts.append(ad.concat([q] * b, axis=0) if b > 1 else q)
        x = ad.concat(parts, axis=1)
        s = x.shape[1]
        if s > cfg.max_seq:
            raise ConfigError(f"sequence length {s} exceeds max_seq={cfg.max_seq}")
        return ad.add(x, ad.narrow(self.pos_emb, 0, 0, s))

    # -- layer-tapped forward ---------------------------------------------
    def forward_collect(self, embedded: Tensor, taps, n_queries: int) -> dict:
        """Run all m blocks causally; return {tap layer (1-based) -> query
        rows [B,N,D] at that block's output}."""
        cfg = self.cfg
        taps = list(taps)
        if any(t < 1 or t > cfg.m for t in taps):
            raise ConfigError(f"tap indices {taps} out of range 1..{cfg.m}")
        if taps != sorted(set(taps)):
            raise ConfigError("taps must be strictly increasing")
        s = embedded.shape[1]
        mask = causal_mask(s)
        want = set(taps)
        states = {}
        x = embedded
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, mask)
            if i in want:
                states[i] = ad.narrow(x, 1, s - n_queries, n_queries)
        return states

    # -- language-model head (toy pretraining only) ------------------------
    def lm_logits(self, ids: np.ndarray) -> Tensor:
        s = ids.shape[1]
        x = ad.add(ad.gather_rows(self.tok_emb, ids),
                   ad.narrow(self.pos_emb, 0, 0, s))
        mask = causal_mask(s)
        for block in self.blocks:
            x = block(x, mask)
        return self.lm_head(self.final_ln(x))


def _caption_batch(cfg: MllmConfig, seed: int, purpose: str, step: int, batch: int):
    """Caption-grammar LM batch: ids [B, max_text+1] (pad-terminated)."""
    rows = []
    for i in range(batch):
        rng = stream(seed, purpose, step, i)
        category = bench.CATEGORIES[int(rng.integers(len(bench.CATEGORIES)))]
        case = bench.sample_task(rng, category, grid=2, canvas=cfg.img_side)
        ids = case.tokens[: cfg.max_text]
        rows.append(ids + [bench.PAD_ID] * (cfg.max_text + 1 - len(ids)))
    return np.array(rows, dtype=np.int64)


def lm_loss(model: ToyMllm, ids: np.ndarray) -> Tensor:
    """Next-token cross-entropy, pad targets excluded."""
    logits = model.lm_logits(ids[:, :-1])
    targets = ids[:, 1:]
    mask = (targets != bench.PAD_ID).astype(np.float64)
    return ad.cross_entropy(logits, targets, mask)


def toy_pretrain(model: ToyMllm, steps: int, seed: int, batch: int = 32,
                 lr: float = 3e-4, log_every: int = 0) -> dict:
    """Train the tower as a caption LM, then freeze every parameter.

    steps=0 is the documented random-frozen baseline. Divergence (NaN loss)
    aborts with the failing step. Returns held-out losses before/after.
    """
    cfg = model.cfg
    held = _caption_batch(cfg, seed, "lm-heldout", 0, 64)
    loss0 = float(lm_loss(model, held).data)
    params = model.trainable_params()
    moments = {p.name: (np.zeros_like(p.data), np.zeros_like(p.data)) for p in params}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(steps):
        ids = _caption_batch(cfg, seed, "lm-train", step, batch)
        try:
            loss = lm_loss(model, ids)
        except ad.NonFiniteError as exc:
            raise RuntimeError(f"toy_pretrain diverged at step {step}: {exc}") from exc
        for p in params:
            p.zero_grad()
        loss.backward()
        t = step + 1
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = moments[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        if log_every and step % log_every == 0:
            print(f"  lm step {step}: loss {float(loss.data):.4f}")
    loss1 = float(lm_loss(model, held).data)
    model.freeze()
    return {"steps": steps, "heldout_loss_init": loss0, "heldout_loss_final": loss1}
