"""Partial-noise editing test: seed the Euler integration at mid-t from a
color-neutralized source image and let the conditions decide the color."""
import sys
import time

import numpy as np

from ladderflow import bench
from ladderflow.flow import SamplerConfig, initial_noise
from ladderflow.rng import stream
from ladderflow.model import evaluate_edits
sys.path.insert(0, "scripts")
from stage2_guided import load_stage1 as load_model


def partial_euler(vfn, x, t_start, steps):
    k0 = max(1, round(t_start * steps))
    for k in range(k0, 0, -1):
        t = k / steps
        x = x - (1.0 / steps) * vfn(x, t)
    return np.clip(x, -1.0, 1.0)


def gray(img):
    lum = img.mean(axis=-1, keepdims=True)
    return np.repeat(lum, 3, axis=-1)


def run(ckpt, tag):
    model = load_model(ckpt)
    pairs = [bench.sample_edit(stream(888, "edit-heldout", i), grid=2,
                               canvas=16, kinds=("recolor",)) for i in range(64)]
    prompts = [model.prompt_from_tokens(bench.edit_instruction(es),
                                        (bench.render(es.source) + 1.0) / 2.0)
               for es in pairs]
    v_full = model.velocity_fn(model.condition_stack(prompts).data())
    v_img = model.velocity_fn(model.condition_stack(
        [model.text_dropped_like(p) for p in prompts]).data())
    src = np.stack([bench.render(es.source) for es in pairs])
    tgt = [es.target for es in pairs]
    noise = initial_noise(src.shape, 123, 0)
    steps = 50
    for seed_kind in ("gray", "source"):
        base = gray(src) if seed_kind == "gray" else src
        for t0 in (0.45, 0.55, 0.65, 0.8):
            x_init = ((1 - t0) * base + t0 * noise).astype(np.float32)
            for sT in (1.0, 2.0, 4.0):
                if sT == 1.0:
                    vfn = v_full
                else:
                    vfn = lambda x, t, s=sT: v_img(x, t) + s * (v_full(x, t) - v_img(x, t))
                out = partial_euler(vfn, x_init.copy(), t0, steps)
                ok = sum(bench.parse(im, grid=2) == t for im, t in zip(out, tgt))
                print(f"{tag} seed={seed_kind} t0={t0} sT={sT}: {ok}/64", flush=True)


if __name__ == "__main__":
    run(sys.argv[1], sys.argv[2])
