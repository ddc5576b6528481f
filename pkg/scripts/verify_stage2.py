"""Verify the acceptance stage-2 recipe bit-exactly as the acceptance
fixture runs it: warm optimizer and trainer state carried over from the
saved stage-1 checkpoint."""
import time
from collections import deque

from ladderflow.checkpoint import load_checkpoint
from ladderflow.dit import DitConfig
from ladderflow.flow import SamplerConfig
from ladderflow.mllm import MllmConfig
from ladderflow.model import LadderModel, evaluate_edits
from ladderflow import trainer as tr

t0 = time.time()
config, tensors = load_checkpoint("/tmp/G_stage1.lddr")
model = LadderModel(
    MllmConfig(m=8, d_mllm=128, heads=4, max_text=8, patch=8,
               img_side=16, max_seq=48),
    DitConfig(n=4, d_dit=64, heads=4, img_side=16, patch=4, t_embed_dim=32),
    n_queries=16, seed=0)
model.mllm.freeze()
model.import_tensors({k: v for k, v in tensors.items()
                      if not k.startswith("opt.")})
opt = tr.AdamW(model.params())
opt.load(tensors)
ts = config["train_state"]
g = ts["guard"]
guard = tr.SpikeGuardState(window=g["window"], factor=g["factor"],
                           abs_cap=g["abs_cap"],
                           warmup_exempt=g["warmup_exempt"],
                           norms=deque(g["norms"]), losses=deque(g["losses"]),
                           seen=g["seen"], skipped=g["skipped"])
state = tr.TrainState(seed=ts["seed"], stage_idx=ts["stage_idx"],
                      stage_step=ts["stage_step"],
                      global_step=ts["global_step"], guard=guard)
opt.t = ts["opt_t"]
print(f"resumed: opt.t={opt.t} global_step={state.global_step}", flush=True)

stage2 = tr.StageConfig("ti2i_pretrain", steps=1000, batch_size=128,
                        warmup=50, lr_max=1e-3, lr_min=1e-5,
                        cond_dropout=0.2, t_bias=0.5,
                        edit_kinds=("recolor",))
state.stage_step = 0
for step in range(stage2.steps):
    prompts, x0 = tr.make_batch(model, stage2, 0, step)
    rec = tr.train_step(model, opt, stage2, state, prompts, x0)
    if step % 250 == 0:
        print(f"s{step} loss {rec['loss']:.4f} "
              f"val {tr.val_loss(model, stage2, 0):.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
print(f"stage2 val {tr.val_loss(model, stage2, 0):.4f} "
      f"({time.time()-t0:.0f}s)", flush=True)
tr.save_train_checkpoint("/tmp/V_stage2.lddr",
                         {"mllm": {}, "dit": {}, "bridge": {}},
                         model, opt, state)
cfg = SamplerConfig(steps=50, guidance_scale=1.0, seed=123)
for sT, st_ in ((5.0, 0.55), (4.0, 0.55), (6.0, 0.55), (5.0, 0.5), (5.0, 0.6)):
    rate, _ = evaluate_edits(model, 64, 888, cfg, kinds=("recolor",),
                             text_scale=sT, strength=st_)
    print(f"edit sT={sT} strength={st_}: {rate:.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
print(f"total {time.time()-t0:.0f}s", flush=True)
