"""Gradient-fidelity checks: every layer primitive and the full ladder
model end to end through the flow-matching loss, verified against central
finite differences in 64-bit mode."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import bench, flow
from .dit import DitConfig
from .gradcheck import GradCheckReport, grad_check
from .layers import CrossAttention, LayerNorm, Linear, SelfAttention, causal_mask
from .mllm import MllmConfig
from .model import LadderModel
from .rng import stream


def _sq_mean(t):
    return ad.mean_all(ad.mul(t, t))


def check_primitives(tol: float = 1e-3, coords: int = 16):
    """Yield (name, report) for each layer primitive."""
    rng = stream(0, "verify-primitives")
    results = []

    lin = Linear(5, 4, "lin", rng)
    x_lin = rng.normal(size=(2, 3, 5))
    results.append(("linear", grad_check(
        lambda: _sq_mean(lin(ad.tensor(x_lin))), lin.params(),
        tol=tol, coords_per_param=coords)))

    ln = LayerNorm(8, "ln")
    # non-trivial affine state so the check is not at the init point
    ln.gain.data = rng.normal(1.0, 0.3, 8).astype(np.float32)
    ln.bias.data = rng.normal(0.0, 0.3, 8).astype(np.float32)
    x_ln = rng.normal(size=(4, 8))
    results.append(("layer_norm", grad_check(
        lambda: _sq_mean(ln(ad.tensor(x_ln))), ln.params(),
        tol=tol, coords_per_param=coords)))

    attn = SelfAttention(8, 2, "attn", rng)
    x_attn = rng.normal(size=(2, 4, 8))
    mask = causal_mask(4)
    results.append(("self_attention", grad_check(
        lambda: _sq_mean(attn(ad.tensor(x_attn), mask)), attn.params(),
        tol=tol, coords_per_param=coords)))

    cross = CrossAttention(8, 2, "cross", rng)
    x_cross = rng.normal(size=(2, 4, 8))
    ctx = rng.normal(size=(2, 3, 8))
    results.append(("cross_attention", grad_check(
        lambda: _sq_mean(cross(ad.tensor(x_cross), ad.tensor(ctx))), cross.params(),
        tol=tol, coords_per_param=coords)))

    gl = Linear(6, 6, "gelu_lin", rng)
    x_gelu = rng.normal(size=(3, 6))
    results.append(("gelu", grad_check(
        lambda: _sq_mean(ad.gelu(gl(ad.tensor(x_gelu)))), gl.params(),
        tol=tol, coords_per_param=coords)))

    sm = Linear(6, 6, "softmax_lin", rng)
    x_sm = rng.normal(size=(3, 6))
    results.append(("softmax", grad_check(
        lambda: _sq_mean(ad.softmax(sm(ad.tensor(x_sm)))), sm.params(),
        tol=tol, coords_per_param=coords)))

    emb_rng = stream(0, "verify-embed")
    from .autodiff import Param
    table = Param(emb_rng.normal(0, 0.5, (7, 4)), "emb.table")
    ids = np.array([[0, 3, 6], [2, 2, 5]])
    results.append(("embedding", grad_check(
        lambda: _sq_mean(ad.gather_rows(table, ids)), [table],
        tol=tol, coords_per_param=coords)))

    ce = Linear(4, 7, "ce_lin", rng)
    x_ce = rng.normal(size=(2, 3, 4))
    tgt = np.array([[1, 4, 0], [6, 2, 3]])
    results.append(("cross_entropy", grad_check(
        lambda: ad.cross_entropy(ce(ad.tensor(x_ce)), tgt), ce.params(),
        tol=tol, coords_per_param=coords)))
    return results


def tiny_ladder(m=4, n=2, seed=0, mode="ladder") -> LadderModel:
    """The 8x8-pixel check model used by gradient-fidelity acceptance."""
    mcfg = MllmConfig(m=m, d_mllm=16, heads=2, max_text=4, patch=4, img_side=8,
                      max_seq=16, init_std=0.05)
    dcfg = DitConfig(n=n, d_dit=16, heads=2, img_side=8, patch=4, t_embed_dim=8)
    return LadderModel(mcfg, dcfg, n_queries=4, seed=seed, mode=mode)


def check_end_to_end(tol: float = 1e-3, coords: int = 16,
                     warm_connectors: bool = True) -> GradCheckReport:
    """Grad-check the whole stack (tower -> bridge -> DiT -> flow loss).

    The tower stays frozen exactly as in training, so only trainable
    parameters are checked; connector output layers are nudged off their
    zero init so the query path carries signal.
    """
    model = tiny_ladder()
    model.mllm.freeze()
    if warm_connectors:
        rng = stream(0, "verify-warm")
        for conn in model.bridge.connectors:
            conn.fc2.w.data = rng.normal(0, 0.1, conn.fc2.w.data.shape).astype(np.float32)
    case_rng = stream(0, "verify-case")
    case = bench.sample_task(case_rng, "single_object", grid=2, canvas=8)
    prompts = [model.prompt_from_tokens(case.tokens)]
    x0 = bench.render(case.spec)[None]
    sample = flow.make_flow_sample(x0, stream(0, "verify-flow"))

    def f():
        stack = model.condition_stack(prompts)
        v_pred = model.dit.forward(sample.x_t, sample.t, stack)
        return flow.fm_loss(v_pred, sample)

    return grad_check(f, model.trainable_params(), tol=tol, coords_per_param=coords)
