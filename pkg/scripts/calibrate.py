"""Calibration sweep for the desk-scale learnability criteria (not part of
the test suite)."""

import json
import sys
import time

import numpy as np

from ladderflow import bench
from ladderflow.dit import DitConfig
from ladderflow.flow import SamplerConfig
from ladderflow.mllm import MllmConfig, toy_pretrain
from ladderflow.model import LadderModel, evaluate_model, evaluate_edits
from ladderflow import trainer as tr


def build(pretrain_steps, seed=0):
    m = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8, img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4, t_embed_dim=32),
        n_queries=16, seed=seed)
    if pretrain_steps:
        rep = toy_pretrain(m.mllm, pretrain_steps, seed)
        print("pretrain:", rep, flush=True)
    else:
        m.mllm.freeze()
    return m


def run(tag, pretrain_steps, lr_max, steps1=3000, steps2=1000, warmup=100, seed=0):
    t0 = time.time()
    model = build(pretrain_steps, seed)
    stage1 = tr.StageConfig("t2i_pretrain", steps=steps1, batch_size=32,
                            warmup=warmup, lr_max=lr_max, lr_min=lr_max / 10)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=seed)
    metrics = []
    for s in range(steps1):
        prompts, x0 = tr.make_batch(model, stage1, seed, state.stage_step)
        rec = tr.train_step(model, opt, stage1, state, prompts, x0)
        if s % 100 == 0:
            rec["val_loss"] = tr.val_loss(model, stage1, seed)
            print(f"{tag} s{s} loss {rec['loss']:.4f} val {rec['val_loss']:.4f} "
                  f"({time.time()-t0:.0f}s)", flush=True)
        metrics.append(rec)
    val = [m["val_loss"] for m in metrics if "val_loss" in m]
    losses = [m["loss"] for m in metrics]
    ma100 = float(np.mean(losses[:100]))
    print(f"{tag} step-100 MA {ma100:.4f} final val {val[-1]:.4f} "
          f"drop {(1 - val[-1]/val[1])*100:.1f}% (vs val@100)", flush=True)
    suite = bench.make_suite(777, per_category=64, grid=2, canvas=16)
    scfg = SamplerConfig(steps=50, seed=123)
    t1 = time.time()
    scores, _ = evaluate_model(model, suite, scfg)
    print(f"{tag} scores {json.dumps(scores.as_dict())} eval {time.time()-t1:.0f}s", flush=True)
    # stage 2
    state.stage_step = 0
    stage2 = tr.StageConfig("ti2i_pretrain", steps=steps2, batch_size=32,
                            warmup=50, lr_max=lr_max, lr_min=lr_max / 10)
    for s in range(steps2):
        prompts, x0 = tr.make_batch(model, stage2, seed, state.stage_step)
        rec = tr.train_step(model, opt, stage2, state, prompts, x0)
        if s % 100 == 0:
            print(f"{tag} edit s{s} loss {rec['loss']:.4f}", flush=True)
    rate, _ = evaluate_edits(model, 64, 888, scfg)
    print(f"{tag} edit success {rate:.3f} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    tag = sys.argv[1]
    pre = int(sys.argv[2])
    lr = float(sys.argv[3])
    run(tag, pre, lr)
