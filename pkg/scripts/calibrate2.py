"""Second calibration pass: saves stage-1 checkpoints and sweeps guidance
scales at evaluation time (not part of the test suite)."""

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


def run(tag, pretrain_steps, dit_mlp, lr_max, lr_min, seed=0,
        steps1=3000, steps2=1000):
    t0 = time.time()
    model = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
                   img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4,
                  t_embed_dim=32, mlp_hidden=dit_mlp),
        n_queries=16, seed=seed)
    if pretrain_steps:
        rep = toy_pretrain(model.mllm, pretrain_steps, seed)
        print(f"{tag} pretrain: {rep} ({time.time()-t0:.0f}s)", flush=True)
    else:
        model.mllm.freeze()

    stage1 = tr.StageConfig("t2i_pretrain", steps=steps1, batch_size=32,
                            warmup=100, lr_max=lr_max, lr_min=lr_min)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=seed)
    for s in range(steps1):
        prompts, x0 = tr.make_batch(model, stage1, seed, state.stage_step)
        rec = tr.train_step(model, opt, stage1, state, prompts, x0)
        if s % 200 == 0:
            print(f"{tag} s{s} loss {rec['loss']:.4f} "
                  f"val {tr.val_loss(model, stage1, seed):.4f} "
                  f"({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} stage1 done val {tr.val_loss(model, stage1, seed):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage1.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)

    suite = [c for c in bench.make_suite(777, per_category=64, grid=2, canvas=16)]
    single = [c for c in suite if c.category == "single_object"]
    for g in (1.0, 1.5, 2.0, 3.0, 4.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        prompts = [model.prompt_from_tokens(c.tokens) for c in single]
        images = model.sample(prompts, scfg, noise_index0=0)
        hits = [bench.score_case(c, bench.parse(img, grid=2))
                for c, img in zip(single, images)]
        print(f"{tag} guidance {g}: single_object {np.mean(hits):.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)

    best = None
    for g in (1.0, 1.5, 2.0, 3.0, 4.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        scores, _ = evaluate_model(model, suite, scfg)
        print(f"{tag} guidance {g} full: {json.dumps(scores.as_dict())}",
              flush=True)

    state.stage_step = 0
    stage2 = tr.StageConfig("ti2i_pretrain", steps=steps2, batch_size=32,
                            warmup=50, lr_max=lr_max, lr_min=lr_min)
    for s in range(steps2):
        prompts, x0 = tr.make_batch(model, stage2, seed, state.stage_step)
        tr.train_step(model, opt, stage2, state, prompts, x0)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage2.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    for g in (1.0, 2.0, 3.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        rate, _ = evaluate_edits(model, 64, 888, scfg)
        print(f"{tag} guidance {g}: edit success {rate:.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__" and not sys.argv[1].startswith("v:"):
    tag = sys.argv[1]
    run(tag, pretrain_steps=int(sys.argv[2]), dit_mlp=int(sys.argv[3]),
        lr_max=float(sys.argv[4]), lr_min=float(sys.argv[5]))
# appended: variant entry with d_hid / cond_dropout knobs


def run2(tag, pretrain_steps, d_hid, drop, lr_max=1e-3, lr_min=1e-5, seed=0,
         steps1=3000, steps2=1000):
    t0 = time.time()
    model = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
                   img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4,
                  t_embed_dim=32),
        n_queries=16, d_hid=d_hid, seed=seed)
    if pretrain_steps:
        rep = toy_pretrain(model.mllm, pretrain_steps, seed)
        print(f"{tag} pretrain: {rep} ({time.time()-t0:.0f}s)", flush=True)
    else:
        model.mllm.freeze()
    stage1 = tr.StageConfig("t2i_pretrain", steps=steps1, batch_size=32,
                            warmup=100, lr_max=lr_max, lr_min=lr_min,
                            cond_dropout=drop)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=seed)
    for s in range(steps1):
        prompts, x0 = tr.make_batch(model, stage1, seed, state.stage_step)
        rec = tr.train_step(model, opt, stage1, state, prompts, x0)
        if s % 500 == 0:
            print(f"{tag} s{s} loss {rec['loss']:.4f} "
                  f"val {tr.val_loss(model, stage1, seed):.4f} "
                  f"({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} stage1 val {tr.val_loss(model, stage1, seed):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage1.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    single = [c for c in bench.make_suite(777, per_category=64, grid=2, canvas=16)
              if c.category == "single_object"]
    prompts = [model.prompt_from_tokens(c.tokens) for c in single]
    for g in (1.0, 3.0, 6.0, 8.0, 10.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        images = model.sample(prompts, scfg, noise_index0=0)
        hits = [bench.score_case(c, bench.parse(img, grid=2))
                for c, img in zip(single, images)]
        print(f"{tag} g={g}: single_object {np.mean(hits):.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    state.stage_step = 0
    stage2 = tr.StageConfig("ti2i_pretrain", steps=steps2, batch_size=32,
                            warmup=50, lr_max=lr_max, lr_min=lr_min,
                            cond_dropout=drop)
    for s in range(steps2):
        prompts_b, x0 = tr.make_batch(model, stage2, seed, state.stage_step)
        tr.train_step(model, opt, stage2, state, prompts_b, x0)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage2.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    for g in (1.0, 2.0, 4.0, 6.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        rate, _ = evaluate_edits(model, 64, 888, scfg)
        print(f"{tag} edit g={g}: {rate:.4f} ({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__" and len(sys.argv) >= 2 and sys.argv[1].startswith("v:"):
    _, tag = sys.argv[1].split(":")
    run2(tag, pretrain_steps=int(sys.argv[2]), d_hid=int(sys.argv[3]),
         drop=float(sys.argv[4]))
