"""Third calibration pass: stage-1 category reweighting toward
single-object scenes, plus the large-batch / t-biased stage-2 recipe."""
import sys
import time

import numpy as np

from ladderflow import bench
from ladderflow.dit import DitConfig
from ladderflow.flow import SamplerConfig
from ladderflow.mllm import MllmConfig, toy_pretrain
from ladderflow.model import LadderModel, evaluate_edits
from ladderflow import trainer as tr


def run(tag, weights, s2_batch, s2_drop, s2_tbias, seed=0):
    t0 = time.time()
    model = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
                   img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4,
                  t_embed_dim=32),
        n_queries=16, seed=seed)
    toy_pretrain(model.mllm, 300, seed)
    stage1 = tr.StageConfig("t2i_pretrain", steps=3000, batch_size=32,
                            warmup=100, lr_max=1e-3, lr_min=1e-5,
                            category_weights=weights)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=seed)
    for s in range(3000):
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
    for g in (1.0, 2.0, 4.0, 6.0, 8.0, 10.0):
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        images = model.sample(prompts, scfg, noise_index0=0)
        hits = [bench.score_case(c, bench.parse(img, grid=2))
                for c, img in zip(single, images)]
        print(f"{tag} g={g}: single_object {np.mean(hits):.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    state.stage_step = 0
    stage2 = tr.StageConfig("ti2i_pretrain", steps=1000, batch_size=s2_batch,
                            warmup=50, lr_max=1e-3, lr_min=1e-5,
                            cond_dropout=s2_drop, t_bias=s2_tbias)
    for s in range(1000):
        prompts_b, x0 = tr.make_batch(model, stage2, seed, state.stage_step)
        tr.train_step(model, opt, stage2, state, prompts_b, x0)
    print(f"{tag} stage2 val {tr.val_loss(model, stage2, seed):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage2.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    gs = (1.0, 2.0, 4.0, 6.0, 8.0) if s2_drop > 0 else (1.0,)
    for g in gs:
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        rate, _ = evaluate_edits(model, 64, 888, scfg)
        print(f"{tag} edit g={g}: {rate:.4f} ({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    run(sys.argv[1], tuple(float(x) for x in sys.argv[2].split(",")),
        int(sys.argv[3]), float(sys.argv[4]), float(sys.argv[5]))
