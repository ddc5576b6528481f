"""Run configuration: a JSON document with sections
{mllm, dit, bridge, flow, stages[], sampler, bench, seed}.

Validation is total: every violated constraint is collected and reported
together, unknown keys are rejected, and all cross-section dimension
constraints are checked before anything is allocated.
"""

from __future__ import annotations

import copy
import json

from .bridge import BRIDGE_MODES
from .mllm import ConfigError
from .trainer import STAGE_ORDER

_SECTIONS = {"mllm", "dit", "bridge", "flow", "stages", "sampler", "bench", "seed", "optim"}

_MLLM_KEYS = {"m", "d_mllm", "heads", "vocab", "max_text", "patch", "img_side",
              "max_seq", "mlp_hidden", "init_std", "pretrain_steps"}
_DIT_KEYS = {"n", "d_dit", "heads", "img_side", "patch", "t_embed_dim",
             "mlp_hidden", "init_std"}
_BRIDGE_KEYS = {"mode", "n_queries", "d_hid", "init_std"}
_FLOW_KEYS = {"t_sampler"}
_STAGE_KEYS = {"name", "steps", "batch_size", "warmup", "lr_max", "lr_min",
               "cond_dropout", "t_bias", "category_weights", "mixture",
               "edit_kinds", "val_every", "val_batch"}
_SAMPLER_KEYS = {"steps", "guidance_scale"}
_BENCH_KEYS = {"per_category", "grid"}
_OPTIM_KEYS = {"beta1", "beta2", "eps", "weight_decay"}

DEFAULT_CONFIG = {
    "seed": 0,
    "mllm": {"m": 8, "d_mllm": 128, "heads": 4, "max_text": 8, "patch": 8,
             "img_side": 16, "max_seq": 48, "pretrain_steps": 300},
    "dit": {"n": 4, "d_dit": 64, "heads": 4, "img_side": 16, "patch": 4,
            "t_embed_dim": 32},
    "bridge": {"mode": "ladder", "n_queries": 16},
    "flow": {},
    "stages": [
        {"name": "t2i_pretrain", "steps": 150, "batch_size": 32, "warmup": 20},
        {"name": "ti2i_pretrain", "steps": 60, "batch_size": 32, "warmup": 10},
        {"name": "finetune", "steps": 60, "batch_size": 32, "warmup": 10},
    ],
    "sampler": {"steps": 50, "guidance_scale": 1.0},
    "bench": {"per_category": 64, "grid": 2},
}


def _unknown(section, keys, allowed, problems):
    extra = sorted(set(keys) - allowed)
    if extra:
        problems.append(f"{section}: unknown keys {extra}")


def validate_config(cfg: dict) -> list:
    """Return every violated constraint (empty list means valid)."""
    problems = []
    if not isinstance(cfg, dict):
        return ["config root must be a JSON object"]
    _unknown("config", cfg.keys(), _SECTIONS, problems)
    missing = [s for s in ("mllm", "dit", "bridge", "stages", "sampler", "bench")
               if s not in cfg]
    if missing:
        problems.extend(f"config: missing section {s!r}" for s in missing)
        return problems  # deep checks need every section present

    mllm, dit = cfg["mllm"], cfg["dit"]
    _unknown("mllm", mllm.keys(), _MLLM_KEYS, problems)
    _unknown("dit", dit.keys(), _DIT_KEYS, problems)
    _unknown("bridge", cfg["bridge"].keys(), _BRIDGE_KEYS, problems)
    _unknown("flow", cfg.get("flow", {}).keys(), _FLOW_KEYS, problems)
    _unknown("sampler", cfg["sampler"].keys(), _SAMPLER_KEYS, problems)
    _unknown("bench", cfg["bench"].keys(), _BENCH_KEYS, problems)
    _unknown("optim", cfg.get("optim", {}).keys(), _OPTIM_KEYS, problems)

    m = mllm.get("m", 0)
    n = dit.get("n", 0)
    if m < n:
        problems.append(
            f"mllm.m={m} < dit.n={n}: the tap schedule requires m >= n "
            f"(DiT layer i taps tower layer m-n+i)")
    if m < 1:
        problems.append("mllm.m must be >= 1")
    if n < 1:
        problems.append("dit.n must be >= 1")
    for tower, c in (("mllm", mllm), ("dit", dit)):
        d_key = "d_mllm" if tower == "mllm" else "d_dit"
        d = c.get(d_key, 0)
        heads = c.get("heads", 1)
        if d % max(heads, 1):
            problems.append(f"{tower}.{d_key}={d} not divisible by heads={heads}")
        side, patch = c.get("img_side", 16), c.get("patch", 1)
        if side % max(patch, 1):
            problems.append(f"{tower}.img_side={side} not divisible by patch={patch}")
    if mllm.get("img_side", 16) != dit.get("img_side", 16):
        problems.append(f"mllm.img_side={mllm.get('img_side')} != dit.img_side={dit.get('img_side')}")
    mode = cfg["bridge"].get("mode", "ladder")
    if mode not in BRIDGE_MODES:
        problems.append(f"bridge.mode={mode!r} not one of {BRIDGE_MODES}")
    if cfg["bridge"].get("n_queries", 16) < 1:
        problems.append("bridge.n_queries must be >= 1")

    names = []
    for i, stage in enumerate(cfg["stages"]):
        _unknown(f"stages[{i}]", stage.keys(), _STAGE_KEYS, problems)
        name = stage.get("name")
        if name not in STAGE_ORDER:
            problems.append(f"stages[{i}].name={name!r} not one of {STAGE_ORDER}")
            continue
        names.append(name)
        if stage.get("steps", 0) < 1:
            problems.append(f"stages[{i}].steps must be >= 1")
        if stage.get("batch_size", 1) < 1:
            problems.append(f"stages[{i}].batch_size must be >= 1")
        if not 0 <= stage.get("warmup", 0) < stage.get("steps", 1):
            problems.append(f"stages[{i}]: warmup must satisfy 0 <= warmup < steps")
    order = [STAGE_ORDER.index(nm) for nm in names]
    if order != sorted(order) or len(set(order)) != len(order):
        problems.append(f"stages must run in order {' -> '.join(STAGE_ORDER)}, each at most once")

    if cfg["sampler"].get("steps", 1) < 1:
        problems.append("sampler.steps must be >= 1")
    if cfg["sampler"].get("guidance_scale", 1.0) < 0:
        problems.append("sampler.guidance_scale must be >= 0")
    if cfg["bench"].get("grid", 2) not in (2, 3):
        problems.append("bench.grid must be 2 or 3")
    return problems


def load_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return with_defaults(cfg)


def with_defaults(cfg: dict) -> dict:
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in cfg.items():
        if key in ("mllm", "dit", "bridge", "sampler", "bench", "flow"):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged
