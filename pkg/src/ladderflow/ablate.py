"""Twin-run ablation: the ladder tap schedule versus conditioning every
DiT layer on the tower's final hidden state, with identical seeds, data
order, and budgets. The report is the artifact; no success direction is
asserted."""

from __future__ import annotations

import copy
import json
import os

from . import bench
from .mllm import toy_pretrain
from .model import build_model, evaluate_model
from .trainer import StageConfig, run_pipeline

ABLATION_MODES = ("ladder", "final_layer_only")


def run_ablation(cfg: dict, seed: int, out_dir, log=None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    blocks = {}
    for mode in ABLATION_MODES:
        mode_cfg = copy.deepcopy(cfg)
        mode_cfg["seed"] = seed
        mode_cfg["bridge"]["mode"] = mode
        model = build_model(mode_cfg)
        pre_steps = mode_cfg["mllm"].get("pretrain_steps", 0)
        if pre_steps:
            toy_pretrain(model.mllm, pre_steps, seed)
        else:
            model.mllm.freeze()
        stages = [StageConfig(**{**s, "edit_kinds": tuple(s.get("edit_kinds", ("recolor",)))})
                  for s in mode_cfg["stages"]]
        if log:
            log(f"ablation: training {mode} ...")
        ckpt, metrics = run_pipeline(model, stages, seed,
                                     os.path.join(out_dir, mode), mode_cfg,
                                     collect_digests=True, log=log)
        bcfg = mode_cfg.get("bench", {})
        from .flow import SamplerConfig
        sampler = SamplerConfig(steps=mode_cfg["sampler"].get("steps", 50),
                                guidance_scale=1.0, seed=seed)
        suite = bench.make_suite(seed + 1, per_category=bcfg.get("per_category", 16),
                                 grid=bcfg.get("grid", 2),
                                 canvas=model.mllm_cfg.img_side)
        scores, _ = evaluate_model(model, suite, sampler, grid=bcfg.get("grid", 2))
        train_records = [m for m in metrics if "loss" in m]
        tail = train_records[-20:]
        blocks[mode] = {
            "checkpoint": ckpt,
            "bridge_param_count": model.bridge.param_count(),
            "final_loss": sum(m["loss"] for m in tail) / len(tail),
            "loss_curve": [m["loss"] for m in train_records],
            "batch_digests": [m["batch_digest"] for m in train_records],
            "scores": scores.as_dict(),
        }
    ladder, baseline = (blocks[m] for m in ABLATION_MODES)
    report = {
        "modes": blocks,
        "batch_streams_identical": ladder["batch_digests"] == baseline["batch_digests"],
        "bridge_param_counts_equal":
            ladder["bridge_param_count"] == baseline["bridge_param_count"],
    }
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
