"""Training orchestration: reconstruction pretraining, iterative dataset
updates, the direct-supervision baseline, the GAN-distillation mode, and
the three-stage schedule.

Every stochastic choice (which frame to edit, which rays to sample, latent
draws, level selection) is a pure function of (run seed, iteration), so the
editor-call sequence is identical across modes under one seed and resumed
runs continue the exact stream of the uninterrupted run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import torch

from control4d import checkpoints
from control4d.data.loader import FrameRecord, load_image, load_mask
from control4d.cameras import CameraModel
from control4d.editor import (
    EditRequest,
    extract_normals,
    noise_schedule,
)
from control4d.errors import (
    EditorTransportError,
    EmptyConditionError,
    ValidationError,
)
from control4d.field import SceneField
from control4d.gan import (
    FrozenFeatureNet,
    LevelSchedule,
    MultiLevelGan,
    disc_loss,
    gen_loss,
    perceptual_loss,
)
from control4d.planes import PlaneAtlas
from control4d.renderer import RenderPacket, render_rays, render_view, sample_latent_map
from control4d.utils import (
    bchw_to_hwc,
    check_finite,
    hwc_to_bchw,
    param_checksum,
    seeded_generator,
    to_float,
    to_uint8,
    upsample_image,
)

MODES = ("baseline_du", "control4d")
STAGE_ORDER = ("canonical_edit", "flow_train", "joint_finetune")
CANONICAL_FRAME = 0


@dataclass
class TrainConfig:
    mode: str = "control4d"
    iters: int = 2000
    rays_per_batch: int = 1024
    samples_per_ray: int = 48
    lr_planes: float = 1e-3
    lr_networks: float = 1e-4
    lr_generator: float = 1e-4
    lr_discriminator: float = 2e-4
    du_period: int = 10
    du_source: str = "auto"  # auto | render | generator
    noise_max: float = 0.8
    noise_min: float = 0.1
    level_probs: tuple = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    perceptual_weight: float = 1.0
    l1_weight: float = 10.0
    gp_weight: float = 10.0
    plane_tv_weight: float = 1e-3
    sigma_sparsity_weight: float = 0.0
    latent_per_pixel: bool = False
    upsample_factor: int = 4
    prompt: str = ""
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.du_source not in ("auto", "render", "generator"):
            raise ValidationError(f"unknown du_source {self.du_source!r}")
        positive = {
            "iters": self.iters,
            "rays_per_batch": self.rays_per_batch,
            "samples_per_ray": self.samples_per_ray,
            "lr_planes": self.lr_planes,
            "lr_networks": self.lr_networks,
            "lr_generator": self.lr_generator,
            "lr_discriminator": self.lr_discriminator,
            "du_period": self.du_period,
            "upsample_factor": self.upsample_factor,
            "log_every": self.log_every,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if self.plane_tv_weight < 0:
            raise ValidationError("plane_tv_weight must be non-negative")
        if self.sigma_sparsity_weight < 0:
            raise ValidationError("sigma_sparsity_weight must be non-negative")
        if not 0.0 <= self.noise_min <= self.noise_max <= 1.0:
            raise ValidationError("need 0 <= noise_min <= noise_max <= 1")


@dataclass(frozen=True)
class StageSpec:
    name: str
    iters: int


@dataclass(frozen=True)
class StagePlan:
    """The three-phase schedule; order is fixed by construction."""

    stages: tuple

    def __post_init__(self):
        names = tuple(s.name for s in self.stages)
        if names != STAGE_ORDER:
            raise ValidationError(
                f"stage order must be exactly {STAGE_ORDER}, got {names}"
            )
        if any(s.iters < 0 for s in self.stages):
            raise ValidationError("stage iteration counts must be non-negative")

    @property
    def total_iters(self) -> int:
        return sum(s.iters for s in self.stages)


def make_stage_plan(total_iters: int, fractions=(0.4, 0.2, 0.4)) -> StagePlan:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValidationError(f"stage fractions must be 3 non-negatives summing to 1: {fractions}")
    a = int(round(total_iters * fractions[0]))
    b = int(round(total_iters * fractions[1]))
    return StagePlan(
        stages=(
            StageSpec("canonical_edit", a),
            StageSpec("flow_train", b),
            StageSpec("joint_finetune", total_iters - a - b),
        )
    )


class DatasetState:
    """Cache of the latest edited image per (frame_id, camera_id).

    Entries start as the captured originals (stamp -1) and are replaced by
    editor outputs as dataset updates land. Images are stored quantized to
    8 bits, matching the editor wire format and keeping checkpoints small.
    """

    def __init__(self, images: dict):
        if not images:
            raise ValidationError("dataset state needs at least one entry")
        self.keys = sorted(images)
        self.images = {k: torch.from_numpy(to_uint8(img.numpy())) for k, img in images.items()}
        self.stamps = {k: -1 for k in self.keys}
        self.editor_ids = {k: "original" for k in self.keys}
        self.replacements = 0
        self.skips = 0

    def get(self, key) -> torch.Tensor:
        return torch.from_numpy(to_float(self.images[key].numpy()))

    def replace(self, key, image: torch.Tensor, iteration: int, editor_id: str) -> None:
        if key not in self.images:
            raise ValidationError(f"unknown dataset entry {key}")
        if iteration < self.stamps[key]:
            raise ValidationError(
                f"stamp regression on {key}: {iteration} < {self.stamps[key]}"
            )
        self.images[key] = torch.from_numpy(to_uint8(image.detach().numpy()))
        self.stamps[key] = iteration
        self.editor_ids[key] = editor_id
        self.replacements += 1

    def note_skip(self) -> None:
        self.skips += 1

    def state_dict(self) -> dict:
        return {
            "images": self.images,
            "stamps": self.stamps,
            "editor_ids": self.editor_ids,
            "replacements": self.replacements,
            "skips": self.skips,
        }

    def load_state_dict(self, state: dict) -> None:
        if sorted(state["images"]) != self.keys:
            raise ValidationError("dataset cache keys do not match the loaded dataset")
        self.images = state["images"]
        self.stamps = state["stamps"]
        self.editor_ids = state["editor_ids"]
        self.replacements = state["replacements"]
        self.skips = state["skips"]


@dataclass
class TrainReport:
    mode: str
    seed: int
    records: list = dataclass_field(default_factory=list)
    editor_calls: int = 0
    wall_clock: float = 0.0

    def log(self, iteration: int, losses: dict) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValidationError("report iterations must be strictly increasing")
        self.records.append({"iteration": iteration, **losses})

    def to_jsonl(self, path: Path | str) -> None:
        import json

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "mode": self.mode,
            "seed": self.seed,
            "editor_calls": self.editor_calls,
            "wall_clock": self.wall_clock,
        }
        lines = [json.dumps(header)] + [json.dumps(r) for r in self.records]
        path.write_text("\n".join(lines) + "\n")

    def to_csv(self, path: Path | str) -> None:
        import csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fields = sorted({k for r in self.records for k in r})
        fields = ["iteration"] + [f for f in fields if f != "iteration"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in self.records:
                writer.writerow(r)


def split_plane_params(module: torch.nn.Module):
    """(plane grid params, everything else) for per-group learning rates."""
    plane_ids = set()
    planes = []
    for m in module.modules():
        if isinstance(m, PlaneAtlas):
            for p in m.parameters():
                if id(p) not in plane_ids:
                    plane_ids.add(id(p))
                    planes.append(p)
    nets = [p for p in module.parameters() if id(p) not in plane_ids]
    return planes, nets


def plane_smoothness(field: torch.nn.Module) -> torch.Tensor:
    """Mean squared difference of adjacent plane texels, over every atlas.

    Plane grids only get gradients where training rays hit them, so texels
    off the covered set keep their random init and render as floaters from
    novel views. Penalizing neighbor differences pulls them toward the fit.
    """
    planes, _ = split_plane_params(field)
    total = torch.zeros(())
    for p in planes:
        if p.shape[1] > 1:
            total = total + (p[:, 1:, :] - p[:, :-1, :]).pow(2).mean()
        if p.shape[2] > 1:
            total = total + (p[:, :, 1:] - p[:, :, :-1]).pow(2).mean()
    return total / max(len(planes), 1)


class Trainer:
    """Single-process training driver for one scene.

    Holds the field, the optional GAN, the editor, the edited-image cache,
    and per-group optimizers. `records`/`cams` come from data.load_dataset;
    all frames are kept in memory (desk-scale datasets).
    """

    def __init__(
        self,
        cfg: TrainConfig,
        field: SceneField,
        records: list[FrameRecord],
        cams: dict[str, CameraModel],
        editor=None,
        gan: MultiLevelGan | None = None,
    ):
        self.cfg = cfg
        self.field = field
        self.cams = cams
        self.editor = editor
        self.gan = gan
        if gan is not None and gan.upsample_factor != cfg.upsample_factor:
            raise ValidationError(
                f"gan upsample factor {gan.upsample_factor} != config {cfg.upsample_factor}"
            )
        if cfg.mode == "control4d" and gan is None:
            raise ValidationError("control4d mode needs a MultiLevelGan")

        self.frame_times = {}
        self.originals = {}
        self.masks = {}
        for rec in records:
            self.frame_times[rec.frame_id] = rec.t
            key = (rec.frame_id, rec.camera_id)
            self.originals[key] = load_image(rec.image_path)
            if rec.mask_path is not None:
                self.masks[key] = load_mask(rec.mask_path)
        self.state = DatasetState(self.originals)

        f = cfg.upsample_factor
        self.low_cams = {}
        for cam_id, cam in cams.items():
            if cam.width % f or cam.height % f:
                raise ValidationError(
                    f"camera {cam_id} resolution {cam.width}x{cam.height} is not "
                    f"divisible by upsample factor {f}"
                )
            self.low_cams[cam_id] = cam.scaled(cam.width // f, cam.height // f)

        planes, nets = split_plane_params(field)
        self.opt_field = torch.optim.Adam(
            [
                {"params": planes, "lr": cfg.lr_planes},
                {"params": nets, "lr": cfg.lr_networks},
            ]
        )
        if gan is not None:
            self.opt_gen = torch.optim.Adam(
                [
                    {"params": planes, "lr": cfg.lr_planes},
                    {"params": nets, "lr": cfg.lr_networks},
                    {"params": gan.generator_parameters(), "lr": cfg.lr_generator},
                ]
            )
            self.opt_disc = torch.optim.Adam(
                gan.discriminator.parameters(), lr=cfg.lr_discriminator
            )
            self.perceptual = gan.perceptual
        else:
            self.opt_gen = None
            self.opt_disc = None
            self.perceptual = FrozenFeatureNet()
        self.level_schedule = LevelSchedule(*cfg.level_probs)

        self.iteration = 0
        self.total_iters = cfg.iters
        self.stage: str | None = None
        self.editor_calls: list[tuple] = []
        self.report = TrainReport(mode=cfg.mode, seed=cfg.seed)

    # ---- plumbing -------------------------------------------------------

    def _allowed_keys(self) -> list:
        if self.stage == "canonical_edit":
            keys = [k for k in self.state.keys if k[0] == CANONICAL_FRAME]
            if not keys:
                raise ValidationError(f"no entries at canonical frame {CANONICAL_FRAME}")
            return keys
        return self.state.keys

    def _pick_key(self, purpose: str, iteration: int):
        keys = self._allowed_keys()
        gen = seeded_generator(self.cfg.seed, purpose, iteration)
        return keys[int(torch.randint(len(keys), (), generator=gen))]

    def _render_packet(self, key, iteration: int, purpose: str) -> RenderPacket:
        frame_id, cam_id = key
        return render_view(
            self.field,
            self.low_cams[cam_id],
            self.frame_times[frame_id],
            samples_per_ray=self.cfg.samples_per_ray,
            seed=(self.cfg.seed, purpose, iteration),
        )

    def param_checksums(self) -> dict[str, str]:
        groups = self.field.parameter_groups()
        sums = {
            "flow": param_checksum(groups["flow"]),
            "canonical": param_checksum(groups["canonical"]),
        }
        if self.gan is not None:
            sums["gan"] = param_checksum(self.gan.parameters())
        return sums

    def _set_trainable(self, params, flag: bool) -> None:
        for p in params:
            p.requires_grad_(flag)

    def apply_stage(self, stage_name: str | None) -> None:
        groups = self.field.parameter_groups()
        gan_params = list(self.gan.parameters()) if self.gan is not None else []
        if self.gan is not None:
            frozen_perceptual = list(self.gan.perceptual.parameters())
            gan_params = [p for p in gan_params if all(p is not q for q in frozen_perceptual)]
        if stage_name is None or stage_name == "joint_finetune":
            self._set_trainable(groups["flow"], True)
            self._set_trainable(groups["canonical"], True)
            self._set_trainable(gan_params, True)
        elif stage_name == "canonical_edit":
            self._set_trainable(groups["flow"], False)
            self._set_trainable(groups["canonical"], True)
            self._set_trainable(gan_params, True)
        elif stage_name == "flow_train":
            self._set_trainable(groups["flow"], True)
            self._set_trainable(groups["canonical"], False)
            self._set_trainable(gan_params, False)
        else:
            raise ValidationError(f"unknown stage {stage_name!r}")
        self.stage = stage_name

    @staticmethod
    def _step_if_trainable(optimizer: torch.optim.Optimizer) -> None:
        if any(p.requires_grad for group in optimizer.param_groups for p in group["params"]):
            optimizer.step()

    # ---- reconstruction pretraining -------------------------------------

    def pretrain_reconstruction(self, iters: int) -> dict:
        """Photometric L2 against the captured frames, random ray batches."""
        cfg = self.cfg
        keys = self.state.keys
        start = time.time()
        last = float("nan")
        for it in range(iters):
            key = keys[
                int(
                    torch.randint(
                        len(keys), (), generator=seeded_generator(cfg.seed, "recon-index", it)
                    )
                )
            ]
            frame_id, cam_id = key
            cam = self.cams[cam_id]
            n_px = cam.width * cam.height
            gen = seeded_generator(cfg.seed, "recon-rays", it)
            pixel_indices = torch.randperm(n_px, generator=gen)[: cfg.rays_per_batch]
            maps = render_rays(
                self.field,
                cam,
                self.frame_times[frame_id],
                samples_per_ray=cfg.samples_per_ray,
                seed=(cfg.seed, "recon-strata", it),
                pixel_indices=pixel_indices,
            )
            target = self.originals[key].reshape(-1, 3)[pixel_indices]
            loss = ((maps["rgb"] - target) ** 2).mean()
            if cfg.plane_tv_weight > 0:
                loss = loss + cfg.plane_tv_weight * plane_smoothness(self.field)
            if cfg.sigma_sparsity_weight > 0:
                loss = loss + cfg.sigma_sparsity_weight * maps["sigma_mean"].mean()
            check_finite("reconstruction loss", loss)
            self.opt_field.zero_grad()
            loss.backward()
            self.opt_field.step()
            last = float(loss.detach())
            if it % cfg.log_every == 0 or it == iters - 1:
                self.report.log(self.iteration + it, {"phase": "reconstruction", "mse": last})
        self.report.wall_clock += time.time() - start
        self.iteration += iters
        return {"mse": last}

    # ---- dataset update --------------------------------------------------

    def _du_image(self, pkt: RenderPacket, iteration: int) -> torch.Tensor:
        """What the editor sees as the current result, at dataset resolution."""
        src = self.cfg.du_source
        use_gan = self.gan is not None and self.cfg.mode == "control4d" and src != "render"
        if src == "generator" and self.gan is None:
            raise ValidationError("du_source=generator requires a GAN")
        if use_gan:
            latent = sample_latent_map(
                pkt, (self.cfg.seed, "du-latent", iteration), self.cfg.latent_per_pixel
            )
            out = self.gan.generate(1, hwc_to_bchw(pkt.rgb), hwc_to_bchw(latent))
            return bchw_to_hwc(out)
        return upsample_image(pkt.rgb, self.cfg.upsample_factor).clamp(0.0, 1.0)

    def dataset_update_step(self, iteration: int) -> None:
        """One editor call: render a random entry, edit it, replace the cache."""
        if self.editor is None:
            return
        key = self._pick_key("du-index", iteration)
        frame_id, cam_id = key
        noise = noise_schedule(
            min(iteration, self.total_iters),
            self.total_iters,
            self.cfg.noise_max,
            self.cfg.noise_min,
        )
        self.editor_calls.append((iteration, frame_id, cam_id, round(noise, 9)))
        self.report.editor_calls += 1
        with torch.no_grad():
            pkt = self._render_packet(key, iteration, "du-render")
            try:
                normals = extract_normals(pkt.depth, self.low_cams[cam_id])
            except EmptyConditionError:
                self.state.note_skip()
                return
            condition = upsample_image(normals, self.cfg.upsample_factor).clamp(0.0, 1.0)
            du_image = self._du_image(pkt, iteration)
        req = EditRequest(
            render=du_image,
            original=self.originals[key],
            condition=condition,
            prompt=self.cfg.prompt,
            noise_level=noise,
            frame_id=frame_id,
            camera_id=cam_id,
            seed=iteration,
        )
        try:
            edited = self.editor.edit(req)
        except EditorTransportError:
            self.state.note_skip()
            return
        self.state.replace(key, edited.image, iteration, edited.editor_id)

    # ---- per-mode steps ---------------------------------------------------

    def baseline_step(self, iteration: int) -> dict:
        """Direct supervision: upsampled render vs cached edit, L1 + perceptual."""
        key = self._pick_key("step-index", iteration)
        pkt = self._render_packet(key, iteration, "step-render")
        up = upsample_image(pkt.rgb, self.cfg.upsample_factor)
        target = self.state.get(key)
        l1 = (up - target).abs().mean()
        lp = perceptual_loss(self.perceptual, hwc_to_bchw(up), hwc_to_bchw(target))
        loss = l1 + self.cfg.perceptual_weight * lp
        if self.cfg.plane_tv_weight > 0:
            loss = loss + self.cfg.plane_tv_weight * plane_smoothness(self.field)
        check_finite("baseline loss", loss)
        self.opt_field.zero_grad()
        loss.backward()
        self._step_if_trainable(self.opt_field)
        return {"loss": float(loss.detach()), "l1": float(l1.detach()), "perceptual": float(lp.detach())}

    def control4d_step(self, iteration: int) -> dict:
        """One alternating critic/generator update through the render."""
        cfg = self.cfg
        key = self._pick_key("step-index", iteration)
        pkt = self._render_packet(key, iteration, "step-render")
        latent = sample_latent_map(
            pkt, (cfg.seed, "latent-draw", iteration), cfg.latent_per_pixel
        )
        level = self.level_schedule.sample(seeded_generator(cfg.seed, "level", iteration))
        edited = hwc_to_bchw(self.state.get(key))
        fake = self.gan.generate(
            level, hwc_to_bchw(pkt.rgb), hwc_to_bchw(latent), edited if level >= 2 else None
        )

        losses = {"level": level}
        disc_trainable = any(p.requires_grad for p in self.gan.discriminator.parameters())
        if disc_trainable:
            d_loss = disc_loss(
                self.gan.discriminator,
                fake,
                edited,
                cfg.gp_weight,
                generator=seeded_generator(cfg.seed, "gp", iteration),
            )
            check_finite("critic loss", d_loss)
            self.opt_disc.zero_grad()
            d_loss.backward()
            self.opt_disc.step()
            losses["d_loss"] = float(d_loss.detach())

        g_loss = gen_loss(
            self.gan.discriminator,
            self.perceptual,
            level,
            fake,
            edited,
            cfg.perceptual_weight,
            cfg.l1_weight,
        )
        if cfg.plane_tv_weight > 0:
            g_loss = g_loss + cfg.plane_tv_weight * plane_smoothness(self.field)
        check_finite("generator loss", g_loss)
        self.opt_gen.zero_grad()
        self.opt_disc.zero_grad()  # gen_loss backprops through D's score too
        g_loss.backward()
        self._step_if_trainable(self.opt_gen)
        losses["g_loss"] = float(g_loss.detach())
        return losses

    # ---- loops ------------------------------------------------------------

    def run(self, iters: int | None = None) -> TrainReport:
        """The editing loop: dataset updates interleaved with optimizer steps."""
        cfg = self.cfg
        iters = cfg.iters if iters is None else iters
        start = time.time()
        for local_it in range(iters):
            it = self.iteration
            if it % cfg.du_period == 0:
                self.dataset_update_step(it)
            if cfg.mode == "control4d":
                losses = self.control4d_step(it)
            else:
                losses = self.baseline_step(it)
            if it % cfg.log_every == 0 or local_it == iters - 1:
                self.report.log(it, {"phase": self.stage or "edit", **losses})
            self.iteration += 1
        self.report.wall_clock += time.time() - start
        return self.report

    def run_stages(self, plan: StagePlan) -> TrainReport:
        self.total_iters = max(plan.total_iters, 1)
        for stage in plan.stages:
            self.apply_stage(stage.name)
            self.run(stage.iters)
        self.apply_stage(None)
        return self.report

    # ---- evaluation renders ------------------------------------------------

    def render_output(self, cam_id: str, t: float) -> torch.Tensor:
        """Final-medium eval image at dataset resolution, deterministic.

        baseline_du: bilinear-upsampled field render. control4d: level-1
        generator output fed with the latent mean map (no sampling at eval).
        """
        with torch.no_grad():
            pkt = render_view(
                self.field,
                self.low_cams[cam_id],
                t,
                samples_per_ray=self.cfg.samples_per_ray,
                stratified=False,
            )
            if self.cfg.mode == "control4d":
                out = self.gan.generate(1, hwc_to_bchw(pkt.rgb), hwc_to_bchw(pkt.latent_mean))
                return bchw_to_hwc(out)
            return upsample_image(pkt.rgb, self.cfg.upsample_factor).clamp(0.0, 1.0)

    def render_video(self, cam_id: str, times=None) -> torch.Tensor:
        times = (
            [self.frame_times[f] for f in sorted(self.frame_times)] if times is None else times
        )
        return torch.stack([self.render_output(cam_id, float(t)) for t in times])

    # ---- checkpointing -------------------------------------------------------

    def state_dict(self) -> dict:
        state = {
            "field": self.field.state_dict(),
            "opt_field": self.opt_field.state_dict(),
            "dataset": self.state.state_dict(),
            "iteration": self.iteration,
            "total_iters": self.total_iters,
            "stage": self.stage,
            "editor_calls": self.editor_calls,
            "report_records": self.report.records,
            "report_editor_calls": self.report.editor_calls,
        }
        if self.gan is not None:
            state["gan"] = self.gan.state_dict()
            state["opt_gen"] = self.opt_gen.state_dict()
            state["opt_disc"] = self.opt_disc.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        self.field.load_state_dict(state["field"])
        self.opt_field.load_state_dict(state["opt_field"])
        self.state.load_state_dict(state["dataset"])
        self.iteration = state["iteration"]
        self.total_iters = state["total_iters"]
        self.stage = state["stage"]
        self.editor_calls = list(state["editor_calls"])
        self.report.records = list(state["report_records"])
        self.report.editor_calls = state["report_editor_calls"]
        if self.gan is not None and "gan" in state:
            self.gan.load_state_dict(state["gan"])
            self.opt_gen.load_state_dict(state["opt_gen"])
            self.opt_disc.load_state_dict(state["opt_disc"])

    def save(self, path: Path | str, config: dict) -> None:
        checkpoints.save_checkpoint(
            path, self.state_dict(), config, self.stage, self.iteration
        )

    def load(self, path: Path | str, config: dict | None = None) -> dict:
        manifest, state = checkpoints.load_checkpoint(path, expected_config=config)
        self.load_state_dict(state)
        return manifest
