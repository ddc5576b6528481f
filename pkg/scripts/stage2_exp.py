"""Stage-2 recipe experiments from a saved stage-1 checkpoint."""
import sys
import time

import numpy as np

from ladderflow.checkpoint import load_checkpoint
from ladderflow.dit import DitConfig
from ladderflow.flow import SamplerConfig
from ladderflow.mllm import MllmConfig
from ladderflow.model import LadderModel, evaluate_edits
from ladderflow import trainer as tr


def load_d(path, d_hid=0):
    model = LadderModel(
        MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
                   img_side=16, max_seq=48),
        DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4,
                  t_embed_dim=32),
        n_queries=16, d_hid=d_hid, seed=0)
    _, tensors = load_checkpoint(path)
    model.import_tensors({k: v for k, v in tensors.items()
                          if not k.startswith("opt.")})
    model.mllm.freeze()
    return model


def main(tag, ckpt, batch, drop, lr_max, lr_min, d_hid=0, t_bias=0.0):
    t0 = time.time()
    model = load_d(ckpt, d_hid)
    stage2 = tr.StageConfig("ti2i_pretrain", steps=1000, batch_size=batch,
                            warmup=50, lr_max=lr_max, lr_min=lr_min,
                            cond_dropout=drop, t_bias=t_bias)
    opt = tr.AdamW(model.params())
    state = tr.TrainState(seed=0)
    for s in range(1000):
        prompts, x0 = tr.make_batch(model, stage2, 0, state.stage_step)
        rec = tr.train_step(model, opt, stage2, state, prompts, x0)
        if s % 200 == 0:
            print(f"{tag} s{s} loss {rec['loss']:.4f} "
                  f"val {tr.val_loss(model, stage2, 0):.4f} "
                  f"({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} stage2 val {tr.val_loss(model, stage2, 0):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tr.save_train_checkpoint(f"/tmp/{tag}_stage2.lddr",
                             {"mllm": {}, "dit": {}, "bridge": {}},
                             model, opt, state)
    gs = (1.0, 2.0, 4.0, 6.0, 8.0, 10.0) if drop > 0 else (1.0,)
    for g in gs:
        scfg = SamplerConfig(steps=50, guidance_scale=g, seed=123)
        rate, _ = evaluate_edits(model, 64, 888, scfg)
        print(f"{tag} edit g={g}: {rate:.4f} ({time.time()-t0:.0f}s)", flush=True)
    print(f"{tag} total {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2], int(sys.argv[3]), float(sys.argv[4]),
         float(sys.argv[5]), float(sys.argv[6]),
         int(sys.argv[7]) if len(sys.argv) > 7 else 0,
         float(sys.argv[8]) if len(sys.argv) > 8 else 0.0)
