"""Command-line harness: train, sample, inspect, noise-demo.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error.
"""
from __future__ import annotations

import json
import math
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import ConditioningBundle, EmbeddingFileError, load_embedding_file
from .config import (
    ConfigError,
    DataConfig,
    RunConfig,
    available_presets,
    backbone_config_to_dict,
    build_backbone,
    build_schedule,
    load_preset,
    load_run_config,
)
from .core import q_sample
from .reports import channel_stats, count_report, emit_sample_grid
from .samplers import run_sampler
from .training import Trainer, TrainingDiverged


@click.group()
def cli():
    """Diffusion engine with IU-ViT and ASCEND denoiser backbones."""


def _load_image(path, expected_size) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (expected_size, expected_size):
        raise ConfigError(
            "image", f"{path} is {img.size[0]}x{img.size[1]}, expected"
            f" {expected_size}x{expected_size} (resizing is out of scope)",
        )
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def _load_dataset(data: DataConfig, image_size: int):
    if not data.dataset_dir:
        raise ConfigError("data.dataset_dir", "required for this command")
    root = Path(data.dataset_dir)
    files = sorted(root.glob("*.png"))
    if not files:
        raise ConfigError("data.dataset_dir", f"no PNG images in {root}")
    images = torch.stack([_load_image(f, image_size) for f in files])
    keys = [f.stem for f in files]
    labels = None
    if data.labels_manifest:
        table = {}
        with open(data.labels_manifest) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                name, _, label = line.partition(",")
                table[Path(name).stem] = int(label)
        try:
            labels = torch.tensor([table[k] for k in keys], dtype=torch.long)
        except KeyError as e:
            raise ConfigError("data.labels_manifest", f"no label for image {e}")
    return images, keys, labels


def _make_bundle(cfg: RunConfig, keys, labels, store, idx) -> ConditioningBundle | None:
    label = labels[idx] if labels is not None else None
    sequence = mask = None
    if store is not None:
        rows = []
        for i in idx.tolist():
            key = keys[i]
            if key not in store:
                raise ConfigError("data.embedding_file", f"no embedding for key {key!r}")
            rows.append(torch.from_numpy(store[key]))
        sequence = torch.stack(rows)
        mask = torch.ones(sequence.shape[:2], dtype=torch.bool)
    if label is None and sequence is None:
        return None
    return ConditioningBundle(sequence=sequence, mask=mask, label=label)


class _CountingModel:
    def __init__(self, model):
        self.model = model
        self.calls = 0

    def __call__(self, x, t, cond):
        self.calls += 1
        return self.model(x, t, cond)


@cli.command("train")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Checkpoint to resume from.")
def cmd_train(config_path, resume):
    """Train the configured backbone on a directory of PNG images."""
    cfg = load_run_config(config_path)
    sched = build_schedule(cfg.schedule)
    model = build_backbone(cfg.backbone)
    images, keys, labels = _load_dataset(cfg.data, cfg.backbone.image_size)
    store = None
    if cfg.data.embedding_file:
        store = load_embedding_file(
            cfg.data.embedding_file,
            expected_context=cfg.backbone.text_context,
            expected_width=cfg.backbone.text_width,
        )
    trainer = Trainer(model, sched, cfg.train, backbone_config_to_dict(cfg.backbone))
    if resume:
        state = load_checkpoint(resume)
        if state.model_config != trainer.model_config:
            raise CheckpointError(
                f"{resume}: checkpoint was written for a different backbone config"
            )
        trainer.restore(state)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    start = time.monotonic()
    with open(log_path, "a") as log:
        while trainer.iteration < cfg.train.max_iterations:
            idx = torch.randint(
                len(images), (cfg.train.batch_size,), generator=trainer.generator
            )
            cond = _make_bundle(cfg, keys, labels, store, idx)
            loss = trainer.step(images[idx], cond)
            record = {
                "iteration": trainer.iteration,
                "loss": loss,
                "elapsed": time.monotonic() - start,
            }
            log.write(json.dumps(record) + "\n")
            log.flush()
            it = trainer.iteration
            if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
                save_checkpoint(trainer.state(), out / "checkpoint_latest.ckpt")
            if cfg.sample_interval and it % cfg.sample_interval == 0:
                grid = run_sampler(
                    lambda x, t, c: model(x, t, c),
                    cfg.sampler,
                    sched,
                    (16, cfg.backbone.in_channels, cfg.backbone.image_size, cfg.backbone.image_size),
                )
                emit_sample_grid(grid, out / f"samples_{it:08d}.png", grid_cols=4)
    save_checkpoint(trainer.state(), out / "checkpoint_latest.ckpt")
    click.echo(f"trained to iteration {trainer.iteration}; checkpoint in {out}")


@cli.command("sample")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), required=True)
@click.option("--count", default=16, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--ema/--raw", "use_ema", default=False, help="Sample with EMA weights.")
@click.option("--steps", type=int, default=None)
@click.option("--guidance-scale", type=float, default=None)
@click.option("--eta", type=float, default=None)
@click.option("--seed", type=int, default=None)
def cmd_sample(config_path, checkpoint_path, count, out_path, use_ema, steps,
               guidance_scale, eta, seed):
    """Draw samples from a trained checkpoint and write a PNG grid."""
    import dataclasses

    cfg = load_run_config(config_path)
    sched = build_schedule(cfg.schedule)
    model = build_backbone(cfg.backbone)
    state = load_checkpoint(checkpoint_path)
    if state.model_config != backbone_config_to_dict(cfg.backbone):
        raise CheckpointError(
            f"{checkpoint_path}: checkpoint backbone config does not match {config_path}"
        )
    weights = dict(state.model_state)
    if use_ema:
        weights.update(state.ema_state)
    model.load_state_dict(weights)
    model.eval()

    spec = cfg.sampler
    overrides = {}
    if steps is not None:
        overrides["num_steps"] = steps
    if guidance_scale is not None:
        overrides["guidance"] = dataclasses.replace(spec.guidance, scale=guidance_scale)
    if eta is not None:
        overrides["eta"] = eta
    if seed is not None:
        overrides["seed"] = seed
    spec = dataclasses.replace(spec, **overrides)

    counted = _CountingModel(model)
    size = cfg.backbone.image_size
    with torch.no_grad():
        batch = run_sampler(
            counted, spec, sched, (count, cfg.backbone.in_channels, size, size)
        )
    cols = max(1, math.isqrt(count))
    emit_sample_grid(batch, out_path, grid_cols=cols)
    np.save(str(Path(out_path).with_suffix(".npy")), batch.numpy())
    stats = channel_stats(batch)
    click.echo(f"model_evaluations={counted.calls}")
    click.echo(f"channel_means={np.round(stats['mean'], 4).tolist()}")
    click.echo(f"wrote {out_path}")


@cli.command("inspect")
@click.argument("config_path", type=click.Path(exists=True), required=False)
@click.option("--preset", "preset_name", default=None,
              help=f"One of: {', '.join(available_presets())}")
@click.option("--assert-params", "assert_params", type=int, default=None)
@click.option("--tol", type=float, default=0.10, show_default=True)
def cmd_inspect(config_path, preset_name, assert_params, tol):
    """Print the parameter/FLOP report; optionally assert the total count."""
    if (config_path is None) == (preset_name is None):
        raise ConfigError("inspect", "give exactly one of CONFIG_PATH or --preset")
    if preset_name is not None:
        cfg = load_run_config({"preset": preset_name})
    else:
        cfg = load_run_config(config_path)
    report = count_report(cfg.backbone)
    for line in report.lines():
        click.echo(line)
    if assert_params is not None:
        rel = abs(report.total_params - assert_params) / assert_params
        if rel > tol:
            raise ConfigError(
                "assert-params",
                f"total {report.total_params} deviates {rel:.3f} from"
                f" {assert_params} (tolerance {tol})",
            )
        click.echo(f"params_within_tolerance=true rel_error={rel:.4f}")


@cli.command("noise-demo")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--timesteps", default="0,249,499,749,999", show_default=True,
              help="Comma-separated 0-based timesteps.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_noise_demo(config_path, image_path, timesteps, out_path, seed):
    """Emit a forward-process strip: the image noised at the given timesteps."""
    cfg = load_run_config(config_path)
    sched = build_schedule(cfg.schedule)
    try:
        ts = [int(s) for s in timesteps.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("timesteps", f"could not parse {timesteps!r}")
    for t in ts:
        if not 0 <= t < sched.num_steps:
            raise ConfigError("timesteps", f"{t} outside [0, {sched.num_steps})")
    x0 = _load_image(image_path, cfg.backbone.image_size).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    panels = []
    for t in ts:
        eps = torch.randn(x0.shape, generator=gen)
        panels.append(q_sample(x0, torch.tensor([t]), eps, sched)[0].clamp(-1, 1))
    emit_sample_grid(torch.stack(panels), out_path, grid_cols=len(ts))
    click.echo(f"wrote {out_path}")


def main():
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(2)
    except ConfigError as e:
        click.echo(f"configuration error: {e}", err=True)
        sys.exit(1)
    except (CheckpointError, EmbeddingFileError, TrainingDiverged) as e:
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(2)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        click.echo(f"runtime error: {type(e).__name__}: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
