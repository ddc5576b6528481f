"""Three-stage training pipeline: text-to-image pretraining, image-text-to-
image pretraining, then a fine-tune on a mixture of both. AdamW with a
per-stage cosine schedule and linear warmup, a median-based spike guard
with skip-update semantics, JSONL metrics, and bit-exact resumable
checkpoints.

Skipped steps zero the gradients and advance the schedule; parameter
values, optimizer moments, and the guard window stay bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bench
from .checkpoint import load_checkpoint, save_checkpoint
from .mllm import ConfigError
from .model import LadderModel, build_model
from .rng import stream

STAGE_ORDER = ("t2i_pretrain", "ti2i_pretrain", "finetune")


@dataclass
class StageConfig:
    name: str
    steps: int
    batch_size: int = 32
    warmup: int = 0
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    cond_dropout: float = 0.1
    t_bias: float = 0.0           # fraction of samples with t ~ U(0.5, 1)
    category_weights: tuple = ()  # t2i sampling weights over bench.CATEGORIES
                                  # (empty = uniform)
    mixture: float = 0.5          # finetune only: fraction of t2i batches
    edit_kinds: tuple = ("recolor",)
    val_every: int = 100
    val_batch: int = 32

    def __post_init__(self):
        if self.name not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {self.name!r}; expected one of {STAGE_ORDER}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("stage steps and batch_size must be >= 1")
        if not 0 <= self.warmup < self.steps:
            raise ConfigError("warmup must satisfy 0 <= warmup < steps")
        if not 0.0 <= self.t_bias <= 1.0:
            raise ConfigError("t_bias must be in [0, 1]")
        if self.category_weights:
            w = tuple(self.category_weights)
            if len(w) != len(bench.CATEGORIES) or min(w) < 0 or sum(w) <= 0:
                raise ConfigError(
                    f"category_weights needs {len(bench.CATEGORIES)} "
                    f"non-negative entries (one per benchmark category) "
                    f"with a positive sum")


def validate_stage_order(stages) -> None:
    indices = [STAGE_ORDER.index(s.name) for s in stages]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ConfigError(f"stages must run in order {' -> '.join(STAGE_ORDER)} "
                          f"(each at most once); got {[s.name for s in stages]}")


def lr_at(step: int, total_steps: int, warmup: int, lr_max: float, lr_min: float) -> float:
    """Linear ramp 0 -> lr_max over [0, warmup], then cosine to lr_min."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if not 0 <= warmup < total_steps:
        raise ValueError(f"warmup {warmup} must be < total_steps {total_steps}")
    if step <= warmup:
        return lr_max * (step / warmup) if warmup else lr_max
    frac = (step - warmup) / (total_steps - warmup)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class SpikeGuardState:
    window: int = 100
    factor: float = 3.0
    abs_cap: float = 100.0
    warmup_exempt: int = 0
    norms: deque = field(default_factory=deque)
    losses: deque = field(default_factory=deque)
    seen: int = 0
    skipped: int = 0


def spike_guard(state: SpikeGuardState, grad_norm: float, loss: float) -> str:
    """Decide 'apply' or 'skip'; accepted values feed the rolling window.

    Skips when the value is non-finite, exceeds the absolute cap, or (once
    the window is full) exceeds factor x rolling median of accepted steps.
    Medians resist contamination because skipped values never enter.
    """
    state.seen += 1
    skip = False
    if not (math.isfinite(grad_norm) and math.isfinite(loss)):
        skip = True
    elif grad_norm > state.abs_cap:
        skip = True
    elif state.seen > state.warmup_exempt and len(state.norms) >= state.window:
        if (grad_norm > state.factor * float(np.median(state.norms))
                or loss > state.factor * float(np.median(state.losses))):
            skip = True
    if skip:
        state.skipped += 1
        return "skip"
    state.norms.append(grad_norm)
    state.losses.append(loss)
    while len(state.norms) > state.window:
        state.norms.popleft()
        state.losses.popleft()
    return "apply"


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over trainable Params."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += ((1 - b1) * g).astype(m.dtype)
            v *= b2
            v += ((1 - b2) * g * g).astype(v.dtype)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)
            if self.weight_decay:
                p.data -= (lr * self.weight_decay) * p.data

    def export(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load(self, tensors: dict):
        for name in self.m:
            self.m[name] = np.ascontiguousarray(tensors[f"opt.m.{name}"], dtype=np.float32)
            self.v[name] = np.ascontiguousarray(tensors[f"opt.v.{name}"], dtype=np.float32)


@dataclass
class TrainState:
    seed: int
    stage_idx: int = 0
    stage_step: int = 0
    global_step: int = 0
    guard: SpikeGuardState = field(default_factory=SpikeGuardState)


# ---------------------------------------------------------------------------
# data

def make_batch(model: LadderModel, stage: StageConfig, seed: int, step: int,
               purpose: str = "data"):
    """Deterministic per-(stage, step, index) batch. Returns (prompts, x0)."""
    cfg = model.mllm_cfg
    grid = 2 if cfg.img_side <= 16 else 3
    kind = {"t2i_pretrain": "t2i", "ti2i_pretrain": "edit"}.get(stage.name)
    if kind is None:  # finetune: whole-batch coin keeps layouts uniform
        coin = stream(seed, f"{stage.name}-mix", step).uniform()
        kind = "t2i" if coin < stage.mixture else "edit"
    prompts, x0 = [], []
    for i in range(stage.batch_size):
        rng = stream(seed, f"{stage.name}-{purpose}", step, i)
        if kind == "t2i":
            if stage.category_weights:
                w = np.asarray(stage.category_weights, dtype=np.float64)
                category = bench.CATEGORIES[int(rng.choice(len(w), p=w / w.sum()))]
            else:
                category = bench.CATEGORIES[int(rng.integers(len(bench.CATEGORIES)))]
            case = bench.sample_task(rng, category, grid=grid, canvas=cfg.img_side)
            prompts.append(model.prompt_from_tokens(case.tokens))
            x0.append(bench.render(case.spec))
        else:
            es = bench.sample_edit(rng, grid=grid, canvas=cfg.img_side,
                                   kinds=tuple(stage.edit_kinds))
            src01 = (bench.render(es.source) + 1.0) / 2.0
            prompts.append(model.prompt_from_tokens(bench.edit_instruction(es), src01))
            x0.append(bench.render(es.target))
    return prompts, np.stack(x0)


def batch_digest(prompts, x0) -> str:
    h = hashlib.sha256()
    for p in prompts:
        h.update(np.asarray(p.text_ids, dtype=np.int64).tobytes())
        if p.has_image:
            h.update(np.ascontiguousarray(p.image, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(x0, dtype=np.float32).tobytes())
    return h.hexdigest()


def apply_cond_dropout(model: LadderModel, prompts, p_drop: float, seed: int, step: int):
    """Condition dropout. Text-only prompts drop to the empty prompt with
    probability p_drop. Image-bearing prompts drop text and image
    independently, each with probability p_drop, so sampling can guide the
    instruction against a source-image-only null."""
    if p_drop <= 0:
        return prompts
    out = []
    for i, prompt in enumerate(prompts):
        rng = stream(seed, "cond-dropout", step, i)
        if not prompt.has_image:
            out.append(model.null_prompt_like(prompt)
                       if rng.uniform() < p_drop else prompt)
            continue
        drop_text = rng.uniform() < p_drop
        drop_image = rng.uniform() < p_drop
        if drop_text and drop_image:
            out.append(model.null_prompt_like(prompt))
        elif drop_text:
            out.append(model.text_dropped_like(prompt))
        elif drop_image:
            out.append(model.image_dropped_like(prompt))
        else:
            out.append(prompt)
    return out


# ---------------------------------------------------------------------------
# stepping

def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:  # fixed iteration order for reproducibility
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def train_step(model: LadderModel, opt: AdamW, stage: StageConfig,
               state: TrainState, prompts, x0) -> dict:
    lr = lr_at(state.stage_step, stage.steps, stage.warmup, stage.lr_max, stage.lr_min)
    trainables = opt.params
    for p in trainables:
        p.zero_grad()
    loss_val = float("nan")
    grad_norm = float("inf")
    try:
        dropped = apply_cond_dropout(model, prompts, stage.cond_dropout,
                                     state.seed, state.global_step)
        rng = stream(state.seed, f"{stage.name}-flow", state.stage_step)
        t = None
        if stage.t_bias > 0:
            # oversample the noise-dominant regime, where the velocity must be
            # decoded from the conditions rather than read off x_t
            trng = stream(state.seed, f"{stage.name}-tbias", state.stage_step)
            t = trng.uniform(0.0, 1.0, size=len(prompts))
            hi = trng.uniform(0.0, 1.0, size=len(prompts)) < stage.t_bias
            t[hi] = trng.uniform(0.5, 1.0, size=len(prompts))[hi]
        loss, _ = model.loss_on(dropped, x0, rng, t=t)
        loss_val = float(loss.data)
        loss.backward()
        grad_norm = global_grad_norm(trainables)
    except ad.NonFiniteError:
        pass  # handled as a skip below; params are untouched
    decision = spike_guard(state.guard, grad_norm, loss_val)
    if decision == "apply":
        opt.step(lr)
    for p in trainables:
        p.zero_grad()
    record = {"step": state.global_step, "stage": stage.name, "loss": loss_val,
              "grad_norm": grad_norm, "lr": lr, "skipped": decision == "skip"}
    state.stage_step += 1
    state.global_step += 1
    return record


def val_loss(model: LadderModel, stage: StageConfig, seed: int) -> float:
    """Loss on a fixed held-out batch with fixed noise (comparable curve)."""
    prompts, x0 = make_batch(model, stage, seed, 0, purpose="valdata")
    rng = stream(seed, f"{stage.name}-valflow", 0)
    loss, _ = model.loss_on(prompts, x0, rng)
    return float(loss.data)


# ---------------------------------------------------------------------------
# checkpoint plumbing

def save_train_checkpoint(path, config: dict, model: LadderModel,
                          opt: AdamW, state: TrainState):
    blob = dict(config)
    blob["train_state"] = {
        "seed": state.seed,
        "stage_idx": state.stage_idx,
        "stage_step": state.stage_step,
        "global_step": state.global_step,
        "opt_t": opt.t,
        "guard": {
            "window": state.guard.window,
            "factor": state.guard.factor,
            "abs_cap": state.guard.abs_cap,
            "warmup_exempt": state.guard.warmup_exempt,
            "norms": list(state.guard.norms),
            "losses": list(state.guard.losses),
            "seen": state.guard.seen,
            "skipped": state.guard.skipped,
        },
    }
    tensors = model.export_tensors()
    tensors.update(opt.export())
    save_checkpoint(path, blob, tensors)


def load_train_checkpoint(path):
    """Returns (config, model, opt, state); bit-exact resume point."""
    config, tensors = load_checkpoint(path)
    model = build_model(config)
    model.mllm.freeze()
    model.import_tensors({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    opt = AdamW(model.params(), **config.get("optim", {}))
    opt.load(tensors)
    ts = config["train_state"]
    g = ts["guard"]
    guard = SpikeGuardState(window=g["window"], factor=g["factor"],
                            abs_cap=g["abs_cap"], warmup_exempt=g["warmup_exempt"],
                            norms=deque(g["norms"]), losses=deque(g["losses"]),
                            seen=g["seen"], skipped=g["skipped"])
    state = TrainState(seed=ts["seed"], stage_idx=ts["stage_idx"],
                       stage_step=ts["stage_step"], global_step=ts["global_step"],
                       guard=guard)
    opt.t = ts["opt_t"]
    return config, model, opt, state


# ---------------------------------------------------------------------------
# pipeline

def run_pipeline(model: LadderModel, stages, seed: int, out_dir,
                 config: dict, opt: AdamW | None = None,
                 state: TrainState | None = None, ckpt_every: int = 0,
                 collect_digests: bool = False, log=None):
    """Execute the stages in order, carrying parameters forward and
    resetting the LR schedule per stage. Returns (final ckpt path, metrics).

    Checkpoints land at every stage boundary (and every ckpt_every steps);
    training is bit-exactly resumable from any of them.
    """
    validate_stage_order(stages)
    frozen = [p for p in model.mllm.params() if p.trainable]
    if frozen:
        raise ConfigError("the tower must be frozen before ladder training "
                          f"({len(frozen)} params still trainable)")
    os.makedirs(out_dir, exist_ok=True)
    if opt is None:
        opt = AdamW(model.params(), **config.get("optim", {}))
    if state is None:
        state = TrainState(seed=seed)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    metrics = []
    # resuming a finished run is a no-op pointing at the last stage's file
    path = os.path.join(out_dir, f"stage{len(stages)}_{stages[-1].name}.lddr")
    mode = "a" if state.global_step else "w"
    with open(metrics_path, mode) as fh:
        for si in range(state.stage_idx, len(stages)):
            stage = stages[si]
            state.stage_idx = si
            while state.stage_step < stage.steps:
                step_i = state.stage_step
                prompts, x0 = make_batch(model, stage, seed, step_i)
                record = train_step(model, opt, stage, state, prompts, x0)
                if collect_digests:
                    record["batch_digest"] = batch_digest(prompts, x0)
                if stage.val_every and step_i % stage.val_every == 0:
                    record["val_loss"] = val_loss(model, stage, seed)
                metrics.append(record)
                fh.write(json.dumps(record) + "\n")
                if log and step_i % 100 == 0:
                    log(f"[{stage.name}] step {step_i}/{stage.steps} "
                        f"loss {record['loss']:.4f}")
                if ckpt_every and state.stage_step % ckpt_every == 0:
                    save_train_checkpoint(
                        os.path.join(out_dir, f"step{state.global_step:07d}.lddr"),
                        config, model, opt, state)
            path = os.path.join(out_dir, f"stage{si + 1}_{stage.name}.lddr")
            state.stage_step = 0
            state.stage_idx = si + 1
            save_train_checkpoint(path, config, model, opt, state)
    return path, metrics
