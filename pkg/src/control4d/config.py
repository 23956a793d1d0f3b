"""Declarative run configuration: strict YAML with lossless round-trips.

A config is a plain nested dict of YAML scalars and lists. Loading merges
the user file over the defaults below; any key not present in the defaults
tree is rejected (with its dotted path), as is any scalar/section type
mismatch. Every command writes its fully resolved config next to its
outputs so runs can be reproduced from the artifact alone.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from control4d.editor import RemoteEditor, SyntheticEditor, SyntheticEditorConfig, identity_style
from control4d.errors import ConfigError
from control4d.field import SceneField
from control4d.gan import MultiLevelGan
from control4d.training import TrainConfig

RESOLVED_NAME = "config.resolved.yaml"


def default_config() -> dict:
    return {
        "seed": 0,
        "scene": {
            "bounds": {"x": [-1.0, 1.0], "y": [-1.0, 1.0], "z": [-1.0, 1.0]},
            "plane_channels": 16,
            "canonical_hr_res": 128,
            "canonical_lr_res": 64,
            "flow_spatial_res": 32,
            "flow_t_res": 16,
            "flow_frequencies": 6,
            "appearance_channels": 16,
            "latent_channels": 8,
            "hidden": 64,
        },
        "train": {
            "mode": "control4d",
            "iters": 2000,
            "rays_per_batch": 1024,
            "samples_per_ray": 48,
            "lr_planes": 1.0e-3,
            "lr_networks": 1.0e-4,
            "lr_generator": 1.0e-4,
            "lr_discriminator": 2.0e-4,
            "du_period": 10,
            "du_source": "auto",
            "noise_max": 0.8,
            "noise_min": 0.1,
            "level_probs": [0.3333333333, 0.3333333333, 0.3333333334],
            "perceptual_weight": 1.0,
            "l1_weight": 10.0,
            "gp_weight": 10.0,
            "plane_tv_weight": 1.0e-3,
            "sigma_sparsity_weight": 0.0,  # reconstruction pretraining only
            "latent_per_pixel": False,
            "upsample_factor": 4,
            "log_every": 50,
        },
        "gan": {
            "base_channels": 32,
            "code_dim": 64,
            "mid_channels": 16,
            "perceptual_seed": 7,
        },
        "editor": {
            "kind": "synthetic",  # synthetic | identity | remote
            "prompt": "",
            "endpoint": None,
            "timeout": 120.0,
            "retries": 3,
            "synthetic": {
                "style_transform": None,  # null = the built-in warm grade
                "jitter_std": 0.0,
                "detail_jitter_std": 0.0,
                "seed_base": 0,
            },
        },
        "stages": {
            "enabled": False,
            "fractions": [0.4, 0.2, 0.4],
        },
        "reconstruct": {
            "iters": 3000,
        },
        "render": {
            "orbit_radius": 3.0,
            "orbit_elevation": 0.4,
            "image_size": 64,
            "focal_px": 90.0,
        },
    }


def _merge(defaults, user, path: str, errors: list[str]):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            errors.append(f"{path or '<root>'}: expected a mapping, got {type(user).__name__}")
            return defaults
        merged = {}
        for key, dval in defaults.items():
            child = f"{path}.{key}" if path else key
            merged[key] = _merge(dval, user[key], child, errors) if key in user else dval
        for key in user:
            if key not in defaults:
                errors.append(f"{path + '.' if path else ''}{key}: unknown config key")
        return merged
    # scalar or list leaf; None in defaults means "any type allowed"
    if defaults is not None and user is not None and not isinstance(user, type(defaults)):
        numeric = isinstance(defaults, float) and isinstance(user, int)
        listy = isinstance(defaults, list) and isinstance(user, list)
        if not numeric and not listy:
            errors.append(
                f"{path}: expected {type(defaults).__name__}, got {type(user).__name__}"
            )
            return defaults
    if isinstance(user, int) and isinstance(defaults, float):
        return float(user)
    return user


def resolve_config(user: dict | None) -> dict:
    errors: list[str] = []
    merged = _merge(default_config(), user or {}, "", errors)
    if errors:
        raise ConfigError("config validation failed:\n  " + "\n  ".join(errors))
    return merged


def load_config(path: Path | str | None) -> dict:
    """Read, validate, and fully resolve a YAML config file (or defaults)."""
    if path is None:
        return resolve_config(None)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        user = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return resolve_config(user)


def dump_config(cfg: dict, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=False, default_flow_style=False))


def write_resolved(cfg: dict, out_dir: Path | str) -> Path:
    out = Path(out_dir) / RESOLVED_NAME
    dump_config(cfg, out)
    return out


# ---- object assembly ------------------------------------------------------


def build_field(cfg: dict) -> SceneField:
    scene = cfg["scene"]
    bounds = {axis: tuple(rng) for axis, rng in scene["bounds"].items()}
    return SceneField(
        bounds,
        plane_channels=scene["plane_channels"],
        canonical_hr_res=scene["canonical_hr_res"],
        canonical_lr_res=scene["canonical_lr_res"],
        flow_spatial_res=scene["flow_spatial_res"],
        flow_t_res=scene["flow_t_res"],
        flow_frequencies=scene["flow_frequencies"],
        appearance_channels=scene["appearance_channels"],
        latent_channels=scene["latent_channels"],
        hidden=scene["hidden"],
        seed=cfg["seed"],
    )


def build_gan(cfg: dict) -> MultiLevelGan:
    gan = cfg["gan"]
    return MultiLevelGan(
        latent_channels=cfg["scene"]["latent_channels"],
        upsample_factor=cfg["train"]["upsample_factor"],
        base_channels=gan["base_channels"],
        code_dim=gan["code_dim"],
        mid_channels=gan["mid_channels"],
        seed=cfg["seed"],
        perceptual_seed=gan["perceptual_seed"],
    )


def build_train_config(cfg: dict, mode: str | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        mode=mode or t["mode"],
        iters=t["iters"],
        rays_per_batch=t["rays_per_batch"],
        samples_per_ray=t["samples_per_ray"],
        lr_planes=t["lr_planes"],
        lr_networks=t["lr_networks"],
        lr_generator=t["lr_generator"],
        lr_discriminator=t["lr_discriminator"],
        du_period=t["du_period"],
        du_source=t["du_source"],
        noise_max=t["noise_max"],
        noise_min=t["noise_min"],
        level_probs=tuple(t["level_probs"]),
        perceptual_weight=t["perceptual_weight"],
        l1_weight=t["l1_weight"],
        gp_weight=t["gp_weight"],
        plane_tv_weight=t["plane_tv_weight"],
        sigma_sparsity_weight=t["sigma_sparsity_weight"],
        latent_per_pixel=t["latent_per_pixel"],
        upsample_factor=t["upsample_factor"],
        prompt=cfg["editor"]["prompt"],
        seed=cfg["seed"],
        log_every=t["log_every"],
    )


def build_editor(cfg: dict, kind: str | None = None, endpoint: str | None = None):
    e = cfg["editor"]
    kind = kind or e["kind"]
    if kind == "remote":
        endpoint = endpoint or e["endpoint"]
        if not endpoint:
            raise ConfigError("remote editor selected but no endpoint configured")
        return RemoteEditor(
            endpoint, prompt=e["prompt"], timeout=e["timeout"], retries=e["retries"]
        )
    syn = e["synthetic"]
    if kind == "identity":
        style = identity_style()
        return SyntheticEditor(
            SyntheticEditorConfig(
                style_transform=style,
                jitter_std=0.0,
                detail_jitter_std=0.0,
                seed_base=syn["seed_base"],
            )
        )
    if kind == "synthetic":
        kwargs = dict(
            jitter_std=syn["jitter_std"],
            detail_jitter_std=syn["detail_jitter_std"],
            seed_base=syn["seed_base"],
        )
        if syn["style_transform"] is not None:
            kwargs["style_transform"] = syn["style_transform"]
        return SyntheticEditor(SyntheticEditorConfig(**kwargs))
    raise ConfigError(f"unknown editor kind {kind!r}")
