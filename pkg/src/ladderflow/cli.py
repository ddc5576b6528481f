"""Command-line surface: train / sample / edit / eval / ablate / gen-data /
grad-check. Checkpoints embed the full run config, so every command after
train needs only the .lddr file. All commands are bit-deterministic in
their file outputs given identical inputs."""

from __future__ import annotations

import json
import os
import sys

import click


def _cap_threads():
    # LDDR_THREADS caps BLAS worker threads; default 1 for bit-exactness.
    n = os.environ.get("LDDR_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


@click.group()
def main():
    """Ladder-side diffusion tuning at desk scale."""
    _cap_threads()


def _load_model_from_checkpoint(path):
    from .trainer import load_train_checkpoint
    return load_train_checkpoint(path)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Run config JSON (defaults baked in if omitted).")
@click.option("--resume", "resume_path", type=click.Path(exists=True),
              help="Resume bit-exactly from a training checkpoint.")
@click.option("--out", "out_dir", default="run", show_default=True)
@click.option("--ckpt-every", default=0, show_default=True)
def train(config_path, resume_path, out_dir, ckpt_every):
    """Run the staged training recipe; writes stage checkpoints + metrics."""
    from .config import DEFAULT_CONFIG, load_config
    from .mllm import ConfigError, toy_pretrain
    from .model import build_model
    from .trainer import StageConfig, run_pipeline

    try:
        if resume_path:
            from .trainer import load_train_checkpoint
            cfg, model, opt, state = load_train_checkpoint(resume_path)
        else:
            cfg = load_config(config_path) if config_path else DEFAULT_CONFIG
            model = build_model(cfg)
            pre_steps = cfg["mllm"].get("pretrain_steps", 0)
            if pre_steps:
                click.echo(f"pretraining tower for {pre_steps} steps...")
                report = toy_pretrain(model.mllm, pre_steps, cfg["seed"])
                click.echo(f"  held-out LM loss {report['heldout_loss_init']:.3f} "
                           f"-> {report['heldout_loss_final']:.3f}")
            else:
                model.mllm.freeze()
            opt = state = None
        stages = [StageConfig(**{**s, "edit_kinds": tuple(s.get("edit_kinds", ("recolor",)))})
                  for s in cfg["stages"]]
        path, metrics = run_pipeline(model, stages, cfg["seed"], out_dir, cfg,
                                     opt=opt, state=state, ckpt_every=ckpt_every,
                                     log=click.echo)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"final checkpoint: {path}")


def _prepare_sampler(cfg, steps, guidance, seed):
    from .flow import SamplerConfig
    s = dict(cfg.get("sampler", {}))
    if steps is not None:
        s["steps"] = steps
    if guidance is not None:
        s["guidance_scale"] = guidance
    return SamplerConfig(steps=s.get("steps", 50),
                         guidance_scale=s.get("guidance_scale", 1.0), seed=seed)


def _check_bridge_flag(cfg, bridge_mode):
    if bridge_mode and bridge_mode != cfg["bridge"].get("mode", "ladder"):
        raise click.ClickException(
            f"checkpoint was trained with bridge mode "
            f"{cfg['bridge'].get('mode', 'ladder')!r}, not {bridge_mode!r}; "
            f"modes cannot be switched after training")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True, help="Whitespace words over the grammar vocabulary.")
@click.option("--steps", type=int, default=None)
@click.option("--guidance", type=float, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--bridge", "bridge_mode", default=None,
              help="Must match the mode stored in the checkpoint.")
@click.option("--out", "out_path", required=True, type=click.Path())
def sample(checkpoint, prompt, steps, guidance, seed, bridge_mode, out_path):
    """Generate one image from a text prompt."""
    from . import bench, ppm

    cfg, model, _, _ = _load_model_from_checkpoint(checkpoint)
    _check_bridge_flag(cfg, bridge_mode)
    try:
        tokens = bench.encode(prompt)
    except bench.VocabError as exc:
        raise click.ClickException(str(exc))
    sampler = _prepare_sampler(cfg, steps, guidance, seed)
    img = model.sample([model.prompt_from_tokens(tokens)], sampler)[0]
    ppm.write_ppm(out_path, ppm.model_to_01(img))
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--source", "source_path", required=True, type=click.Path(exists=True))
@click.option("--instruction", required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--text-guidance", default=5.0, show_default=True,
              help="Instruction guidance scale against a source-only null.")
@click.option("--strength", default=0.55, show_default=True,
              help="Noise level seeding the trajectory from the gray source "
                   "(1.0 = pure noise).")
@click.option("--out", "out_path", required=True, type=click.Path())
def edit(checkpoint, source_path, instruction, steps, seed, text_guidance,
         strength, out_path):
    """Edit a source image per a text instruction. The source enters the
    tower as patch tokens; generation conditions only on the query states,
    and sampling starts from a partially noised grayscale of the source so
    the instruction decides the color."""
    from . import bench, ppm
    from .mllm import ConfigError

    if not instruction.strip():
        raise click.ClickException("instruction must not be empty")
    cfg, model, _, _ = _load_model_from_checkpoint(checkpoint)
    src = ppm.read_ppm(source_path)
    side = model.mllm_cfg.img_side
    if src.shape != (side, side, 3):
        raise click.ClickException(
            f"source image is {src.shape[0]}x{src.shape[1]}, "
            f"model expects {side}x{side}")
    try:
        tokens = bench.encode(instruction)
    except bench.VocabError as exc:
        raise click.ClickException(str(exc))
    try:
        prompt = model.prompt_from_tokens(tokens, src)
    except ConfigError as exc:
        raise click.ClickException(str(exc))
    sampler = _prepare_sampler(cfg, steps, None, seed)
    img = model.sample_edited([prompt], sampler, text_scale=text_guidance,
                              strength=strength)[0]
    ppm.write_ppm(out_path, ppm.model_to_01(img))
    click.echo(f"wrote {out_path}")


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--suite-seed", default=1000, show_default=True)
@click.option("--sample-seed", default=0, show_default=True)
@click.option("--steps", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_cmd(checkpoint, suite_seed, sample_seed, steps, out_path):
    """Score the checkpoint on the six-category compositional benchmark."""
    from . import bench
    from .model import evaluate_model

    cfg, model, _, _ = _load_model_from_checkpoint(checkpoint)
    bcfg = cfg.get("bench", {})
    suite = bench.make_suite(suite_seed, per_category=bcfg.get("per_category", 64),
                             grid=bcfg.get("grid", 2), canvas=model.mllm_cfg.img_side)
    sampler = _prepare_sampler(cfg, steps, None, sample_seed)
    scores, records = evaluate_model(model, suite, sampler, grid=bcfg.get("grid", 2))
    report = {"scores": scores.as_dict(), "per_prompt": records}
    with open(out_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    click.echo(json.dumps(scores.as_dict(), indent=2, sort_keys=True))


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="ablation", show_default=True)
def ablate(config_path, seed, out_dir):
    """Twin runs (ladder vs final-layer-only) on digest-identical batch
    streams; emits a side-by-side report without asserting a direction."""
    from .ablate import run_ablation
    from .config import DEFAULT_CONFIG, load_config

    cfg = load_config(config_path) if config_path else DEFAULT_CONFIG
    report = run_ablation(cfg, seed, out_dir, log=click.echo)
    click.echo(f"report: {os.path.join(out_dir, 'ablation.json')}")
    for mode, block in report["modes"].items():
        click.echo(f"  {mode}: final loss {block['final_loss']:.4f} "
                   f"overall {block['scores']['overall']:.3f}")


@main.command(name="gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n", default=100, show_default=True)
@click.option("--kind", type=click.Choice(["t2i", "edit"]), default="t2i", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--grid", default=2, show_default=True)
@click.option("--canvas", default=16, show_default=True)
def gen_data(out_dir, n, kind, seed, grid, canvas):
    """Write a deterministic synthetic dataset (PPM images + JSONL index)."""
    from .bench import gen_dataset

    index = gen_dataset(out_dir, n, kind, seed, grid=grid, canvas=canvas)
    click.echo(f"wrote {n} {kind} samples, index at {index}")


@main.command(name="grad-check")
@click.option("--full/--primitives-only", default=True, show_default=True,
              help="Also check the full ladder model end to end.")
def grad_check_cmd(full):
    """Finite-difference verification of every layer's gradients."""
    from .verify import check_end_to_end, check_primitives

    ok = True
    for name, report in check_primitives():
        click.echo(f"{name}: {report}")
        ok &= report.ok
    if full:
        report = check_end_to_end()
        click.echo(f"end-to-end ladder + flow loss: {report}")
        ok &= report.ok
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
