"""Command-line entry points: synth / reconstruct / edit / render / eval.

Exit codes: 0 success, 2 validation or config error, 3 editor transport
error, 4 numerical failure. Every training command writes its resolved
config, a report bundle (JSONL + CSV + figures), and a checkpoint into
--out, so runs are reproducible from the artifacts alone.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from control4d import checkpoints, reports
from control4d import config as config_mod
from control4d.cameras import camera_ring
from control4d.data import (
    SyntheticSceneSpec,
    default_scene_spec,
    load_dataset,
    load_image,
    make_synthetic_scene,
    psnr,
    save_image,
    temporal_flicker,
    video_sharpness,
)
from control4d.errors import (
    ConfigError,
    EditorTransportError,
    NumericalError,
    SchemaError,
    ValidationError,
)
from control4d.renderer import render_view, sample_latent_map
from control4d.training import Trainer, make_stage_plan

EVAL_STRIDE = 7


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, ConfigError, SchemaError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except EditorTransportError as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(3)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
def main():
    """Desk-scale 4D scene editing: reconstruction, GAN distillation, eval."""


def _load_cfg(config_path, seed):
    cfg = config_mod.load_config(config_path)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _load_field_checkpoint(ckpt_path, cfg):
    manifest, state = checkpoints.load_checkpoint(ckpt_path)
    ck_scene = manifest["config"].get("scene")
    if ck_scene != cfg["scene"]:
        raise SchemaError(
            f"checkpoint {ckpt_path} was trained with a different scene section; "
            "pass the config it was created with"
        )
    return manifest, state


def _reconstruction_metrics(field, records, cams, samples_per_ray, stride=EVAL_STRIDE):
    """Deterministic render-vs-capture PSNR over a strided subset of records."""
    values = []
    for rec in records[::stride]:
        pkt = render_view(
            field, cams[rec.camera_id], rec.t, samples_per_ray=samples_per_ray, stratified=False
        )
        values.append(psnr(pkt.rgb, load_image(rec.image_path)))
    return {"psnr": float(np.mean(values)), "views_evaluated": len(values)}


# ---- synth -------------------------------------------------------------


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@_exit_codes
def synth(spec_path, out_dir, seed):
    """Generate the analytic blob dataset (frames, masks, calibration)."""
    if spec_path is None:
        spec = default_scene_spec()
    else:
        spec = SyntheticSceneSpec.from_json(json.loads(Path(spec_path).read_text()))
    if seed is not None:
        spec = SyntheticSceneSpec.from_json({**spec.to_json(), "seed": seed})
    records, cams, _ = make_synthetic_scene(spec, out_dir)
    click.echo(f"wrote {len(records)} frames for {len(cams)} cameras to {out_dir}")


# ---- reconstruct ---------------------------------------------------------


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@_exit_codes
def reconstruct(data_dir, config_path, out_dir, seed):
    """Pretrain the dynamic scene model photometrically on captured frames."""
    cfg = _load_cfg(config_path, seed)
    out_dir = Path(out_dir)
    config_mod.write_resolved(cfg, out_dir)
    records, cams = load_dataset(data_dir)
    field = config_mod.build_field(cfg)
    tcfg = config_mod.build_train_config(cfg, mode="baseline_du")
    trainer = Trainer(tcfg, field, records, cams)
    trainer.pretrain_reconstruction(cfg["reconstruct"]["iters"])
    trainer.save(out_dir / "checkpoint.ckpt", cfg)
    metrics = _reconstruction_metrics(field, records, cams, tcfg.samples_per_ray)
    reports.write_metrics(metrics, out_dir)
    reports.write_report(trainer.report, out_dir)
    click.echo(f"reconstruction finished: psnr {metrics['psnr']:.2f} dB -> {out_dir}")


# ---- edit -----------------------------------------------------------------


@main.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--mode", type=click.Choice(["baseline_du", "control4d"]), default=None)
@click.option("--editor", type=click.Choice(["synthetic", "identity", "remote"]), default=None)
@click.option("--prompt", type=str, default=None)
@click.option("--endpoint", type=str, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@_exit_codes
def edit(ckpt_path, data_dir, config_path, mode, editor, prompt, endpoint, out_dir, seed):
    """Edit a reconstructed scene via iterative dataset updates."""
    cfg = _load_cfg(config_path, seed)
    if mode:
        cfg["train"]["mode"] = mode
    if editor:
        cfg["editor"]["kind"] = editor
    if prompt is not None:
        cfg["editor"]["prompt"] = prompt
    if endpoint:
        cfg["editor"]["endpoint"] = endpoint
    out_dir = Path(out_dir)
    config_mod.write_resolved(cfg, out_dir)

    records, cams = load_dataset(data_dir)
    field = config_mod.build_field(cfg)
    _, state = _load_field_checkpoint(ckpt_path, cfg)
    field.load_state_dict(state["field"])
    tcfg = config_mod.build_train_config(cfg)
    gan = config_mod.build_gan(cfg) if tcfg.mode == "control4d" else None
    editor_obj = config_mod.build_editor(cfg)
    if hasattr(editor_obj, "probe"):
        editor_obj.probe()
    trainer = Trainer(tcfg, field, records, cams, editor=editor_obj, gan=gan)
    if cfg["stages"]["enabled"]:
        plan = make_stage_plan(tcfg.iters, tuple(cfg["stages"]["fractions"]))
        trainer.run_stages(plan)
    else:
        trainer.run()
    trainer.save(out_dir / "checkpoint.ckpt", cfg)
    reports.write_report(trainer.report, out_dir)
    (out_dir / "editor_calls.json").write_text(json.dumps(trainer.editor_calls))
    click.echo(
        f"edit run done: {trainer.report.editor_calls} editor calls, "
        f"{trainer.state.replacements} replacements, {trainer.state.skips} skips -> {out_dir}"
    )


# ---- render ----------------------------------------------------------------


@main.command()
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--orbit", type=int, default=8, help="number of ring viewpoints")
@click.option("--times", "time_count", type=int, default=10)
@click.option("--t-start", type=float, default=0.0)
@click.option("--t-end", type=float, default=1.0)
@click.option("--seed", type=int, default=0)
@_exit_codes
def render(ckpt_path, out_dir, orbit, time_count, t_start, t_end, seed):
    """Render an orbit x time grid of views from a checkpoint."""
    if orbit < 1 or time_count < 1:
        raise ValidationError("orbit and times must be positive")
    for t in (t_start, t_end):
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"time {t} outside [0, 1]")
    manifest, state = checkpoints.load_checkpoint(ckpt_path)
    cfg = config_mod.resolve_config(manifest["config"])
    field = config_mod.build_field(cfg)
    field.load_state_dict(state["field"])
    ropts = cfg["render"]
    cams = camera_ring(
        orbit,
        ropts["orbit_radius"],
        ropts["orbit_elevation"],
        ropts["image_size"],
        ropts["image_size"],
        ropts["focal_px"],
    )
    ts = np.linspace(t_start, t_end, time_count)
    out_dir = Path(out_dir)
    with torch.no_grad():
        for vi, cam in enumerate(cams):
            for ti, t in enumerate(ts):
                pkt = render_view(
                    field,
                    cam,
                    float(t),
                    samples_per_ray=cfg["train"]["samples_per_ray"],
                    seed=(seed, vi, ti),
                )
                stem = f"v{vi:02d}_t{ti:03d}"
                save_image(out_dir / f"{stem}.png", pkt.rgb)
                latent = sample_latent_map(pkt, (seed, "render-latent", vi, ti))
                np.save(out_dir / f"{stem}_latent.npy", latent.numpy())
    click.echo(f"wrote {orbit * time_count} views to {out_dir}")


# ---- eval ---------------------------------------------------------------------


def _load_frame_dir(path: Path) -> list:
    frames = sorted(Path(path).glob("*.png"))
    if not frames:
        raise ValidationError(f"no PNG frames in {path}")
    return [load_image(p) for p in frames]


@main.command("eval")
@click.option("--frames", "frames_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_exit_codes
def eval_cmd(frames_dir, gt_dir, ckpt_path, data_dir, out_dir):
    """Compute PSNR / flicker / sharpness, either frames-vs-frames or ckpt-vs-data."""
    if frames_dir and gt_dir:
        video = torch.stack(_load_frame_dir(Path(frames_dir)))
        gt = torch.stack(_load_frame_dir(Path(gt_dir)))
        if video.shape != gt.shape:
            raise ValidationError(
                f"frame stacks disagree: {tuple(video.shape)} vs {tuple(gt.shape)}"
            )
        metrics = {
            "psnr": float(np.mean([psnr(video[i], gt[i]) for i in range(video.shape[0])])),
            "flicker_excess": temporal_flicker(video, gt),
            "sharpness": video_sharpness(video),
            "frames": int(video.shape[0]),
        }
    elif ckpt_path and data_dir:
        records, cams = load_dataset(data_dir)
        manifest, state = checkpoints.load_checkpoint(ckpt_path)
        cfg = config_mod.resolve_config(manifest["config"])
        field = config_mod.build_field(cfg)
        field.load_state_dict(state["field"])
        metrics = _reconstruction_metrics(
            field, records, cams, cfg["train"]["samples_per_ray"]
        )
    else:
        raise ValidationError("pass either --frames with --gt, or --ckpt with --data")
    path = reports.write_metrics(metrics, out_dir)
    click.echo(json.dumps(metrics, indent=1, sort_keys=True))
    click.echo(f"metrics written to {path}")


if __name__ == "__main__":
    main()
