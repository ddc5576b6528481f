"""Stage-2 with independent text/image condition dropout, then a grid sweep
over the two edit-guidance scales."""
import sys
import time

import numpy as np

from ladderflow.checkpoint import load_checkpoint
from ladderflow.dit import DitConfig
from ladderflow.flow import SamplerConfig
from ladderflow.mllm import MllmConfig
from ladderflow.model import LadderModel, evaluate_edits
from ladderflow import trainer as tr


def load_stage1(path):
    model = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
                   img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4,
                  t_embed_dim=32),
        n_queries=16, seed=0)
    _, tensors = load_checkpoint(path)
    model.import_tensors({k: v for k, v in tensors.items()
                          if not k.startswith("opt.")})
    model.mllm.freeze()
    return model


def main(tag, ckpt, batch, drop, t_bias):
    t0 = time.time()
    model = load_stage1(ckpt)
    stage2 = tr.StageConfig("ti2i_pretrain", steps=1000, batch_size=batch,
                            warmup=50, lr_max=1e-3, lr_min=1e-5,
                            cond_dropout=drop, t_bias=t_bias)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=0)
    for s in range(1000):
        prompts, x0 = tr.make_batch(model, stage2, 0, state.stage_step)
        rec = tr.train_step(model, opt, stage2, state, prompts, x0)
        if s % 250 == 0:
            print(f"{tag} s{s} loss {rec['loss']:.4f} "
                  f"val {tr.val_loss(model, stage2, 0):.4f} "
                  f"({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} stage2 val {tr.val_loss(model, stage2, 0):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage2.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    scfg = SamplerConfig(steps=50, guidance_scale=1.0, seed=123)
    for si in (1.0, 1.5, 2.0, 3.0):
        row = []
        for st_ in (1.0, 2.0, 4.0, 6.0, 8.0):
            rate, _ = evaluate_edits(model, 64, 888, scfg,
                                     image_scale=si, text_scale=st_)
            row.append(f"sT{st_}:{rate:.3f}")
        print(f"{tag} sI={si}: " + " ".join(row) +
              f" ({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2], int(sys.argv[3]), float(sys.argv[4]),
         float(sys.argv[5]))
