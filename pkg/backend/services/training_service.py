"""
Training Service for ArtiField
Handles prior training on surface scans and full training on posed images,
plus loading and saving of model checkpoints (network weights, per-subject
latent codes, per-camera calibration and refined per-frame poses).
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ..config import RunConfig
from ..core.capsules import CapsuleRig
from ..core.errors import DivergenceError, NonFiniteError
from ..core.implicit_model import ImplicitModel, LatentCode, LatentTable
from ..core.kinematics import (
    BoneTransforms, Skeleton, forward_kinematics, lbs_weights_reference, skeleton_bounds,
)
from ..core.losses import (
    eikonal_residual, loss_color, loss_reg, loss_weights, prior_terms, sample_eikonal_points,
    spatial_gradient, weighted_total,
)
from ..core.optim import Adam
from ..core.rendering import CalibrationTable, generate_rays, render_rays
from ..core.tensor import Tensor, backward, getitem, parameter
from .storage_service import (
    Dataset, FrameRecord, PointCloud, ViewRecord, load_checkpoint, read_json, save_checkpoint,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.afck"
LOG_NAME = "train_log.jsonl"


@dataclass
class ModelBundle:
    """Everything a checkpoint holds."""

    model: ImplicitModel
    latents: LatentTable
    calibration: CalibrationTable = field(default_factory=CalibrationTable)
    poses: Dict[str, Tensor] = field(default_factory=dict)
    config: RunConfig = field(default_factory=RunConfig)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def fresh(cls, skeleton: Skeleton, config: RunConfig) -> "ModelBundle":
        model = ImplicitModel(skeleton, config.model, seed=config.seed)
        latents = LatentTable(config.model.latent_dim, config.model.latent_init_std, seed=config.seed + 1)
        return cls(model, latents, CalibrationTable(), {}, config)

    def pose_param(self, frame: str, initial: np.ndarray) -> Tensor:
        name = f"pose.{frame}"
        if name not in self.poses:
            self.poses[name] = parameter(initial, name=name)
        return self.poses[name]

    def tensors(self) -> Dict[str, np.ndarray]:
        out = self.model.state_dict()
        out.update(self.latents.state_dict())
        out.update(self.calibration.state_dict())
        out.update({name: t.data.copy() for name, t in self.poses.items()})
        return out

    def code_for(self, subject: Optional[str]) -> LatentCode:
        if subject is not None and subject in self.latents:
            return self.latents[subject]
        return self.latents.mean_code()


def save_bundle(path: str, bundle: ModelBundle, metadata: Optional[Dict[str, Any]] = None) -> None:
    header = {
        "format": "artifield-checkpoint",
        "config": bundle.config.model_dump(),
        "skeleton": bundle.model.skeleton.to_dict(),
        "subjects": bundle.latents.subjects,
        "cameras": bundle.calibration.cameras,
        "metadata": {**bundle.metadata, **(metadata or {})},
    }
    save_checkpoint(path, bundle.tensors(), header)


def load_bundle(path: str) -> ModelBundle:
    header, tensors = load_checkpoint(path)
    config = RunConfig.model_validate(header.get("config", {}))
    skeleton = Skeleton.from_dict(header["skeleton"])
    bundle = ModelBundle.fresh(skeleton, config)
    bundle.model.load_state_dict(tensors)
    bundle.latents.load_state_dict(tensors)
    bundle.calibration.load_state_dict(tensors)
    for name, value in tensors.items():
        if name.startswith("pose."):
            bundle.poses[name] = parameter(value, name=name)
    bundle.metadata = dict(header.get("metadata", {}))
    return bundle


@dataclass
class TrainResult:
    checkpoint: str
    log: str
    steps: int
    final_terms: Dict[str, float]
    wall_time_s: float

    def to_dict(self) -> Dict[str, Any]:
        return {"checkpoint": self.checkpoint, "log": self.log, "steps": self.steps,
                "final_terms": self.final_terms, "wall_time_s": self.wall_time_s}


class TrainLog:
    """Line-delimited JSON training log."""

    def __init__(self, path: Path):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.start = time.perf_counter()

    def write(self, step: int, terms: Dict[str, float], total: float) -> None:
        record = {"step": step, **{k: float(v) for k, v in terms.items()}, "total": float(total),
                  "wall_time_s": round(time.perf_counter() - self.start, 3)}
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def reference_rig(dataset: Dataset, subject: str) -> CapsuleRig:
    """Source of reference skinning weights: the dataset's rig, else a capsule approximation of the skeleton."""
    entry = dataset.manifest.get("subjects", {}).get(subject, {})
    rig_file = entry.get("rig") if isinstance(entry, dict) else None
    if rig_file and dataset.path(rig_file).exists():
        return CapsuleRig.from_dict(read_json(dataset.path(rig_file)))
    return CapsuleRig.default(dataset.subject_skeleton(subject))


def _lr_groups(config: RunConfig) -> Dict[str, float]:
    return {"latent.": config.train.lr_latent, "pose.": config.train.lr_pose,
            "calib.": config.train.lr_calibration}


def _scalar_terms(terms: Dict[str, Tensor]) -> Dict[str, float]:
    return {name: float(value.item()) for name, value in terms.items()}


class _FieldProbe:
    """sdf closure that also keeps the skinning weights of its last evaluation."""

    def __init__(self, model: ImplicitModel, theta: Tensor, code: LatentCode, transforms: BoneTransforms):
        self.model = model
        self.theta = theta
        self.code = code
        self.transforms = transforms
        self.weights: Optional[Tensor] = None

    def __call__(self, x: Tensor) -> Tensor:
        sample = self.model.eval_sdf(x, self.theta, self.code.shape, self.transforms)
        self.weights = sample.weights
        return sample.sdf


def regularization_terms(model: ImplicitModel, rig: CapsuleRig, theta: Tensor, code: LatentCode,
                         transforms: BoneTransforms, seeds: np.ndarray, config: RunConfig,
                         rng: np.random.Generator) -> Dict[str, Tensor]:
    """Eikonal term over Ω and the weight term on its surface-adjacent half."""
    box = skeleton_bounds(transforms.detach(), rig.segments, config.render.bbox_padding)
    omega, near = sample_eikonal_points(seeds, box, config.train.eikonal_points, rng, config.train.eikonal_sigma)
    probe = _FieldProbe(model, theta, code, transforms)
    _, gradient = spatial_gradient(probe, omega)
    terms = {"eik": eikonal_residual(gradient)}
    if np.any(near):
        w_hat = lbs_weights_reference(omega[near], rig, transforms.detach(), config.train.weight_sharpness)
        terms["w"] = loss_weights(getitem(probe.weights, near), w_hat)
    return terms


class TrainingService:
    """Service for prior and full training runs"""

    def __init__(self):
        self.last_result: Optional[TrainResult] = None

    # -- prior training on scans -------------------------------------------------
    def train_prior(self, dataset: Dataset, config: RunConfig, out_dir: str,
                    init_checkpoint: Optional[str] = None) -> TrainResult:
        """Pre-train geometry networks, weight network and per-subject shape codes on scans.

        Objective: λ_surf L_surf + λ_N L_N + λ_Eik L_Eik + λ_w L_w + λ_reg ‖β+‖.
        """
        frames = dataset.scan_frames
        if not frames:
            raise ValueError(f"Dataset at {dataset.root} has no scans to train on")
        rng = np.random.default_rng(config.seed)
        bundle = load_bundle(init_checkpoint) if init_checkpoint else ModelBundle.fresh(dataset.skeleton, config)
        bundle.config = config
        for subject in dataset.subjects:
            bundle.latents.add(subject)

        scans: Dict[str, PointCloud] = {f.name: dataset.scan(f) for f in frames}
        for name, cloud in scans.items():
            if cloud.normals is None:
                raise ValueError(f"Scan {name} has no normals; prior training needs them")
        rigs = {s: reference_rig(dataset, s) for s in dataset.subjects}
        skeletons = {s: dataset.subject_skeleton(s) for s in dataset.subjects}
        poses = {f.name: dataset.pose(f) for f in frames}

        geometry = {k: v for k, v in bundle.model.params.items() if not k.startswith(("color.", "density."))}
        optimizer = Adam(geometry, lr=config.train.lr_network, lr_groups=_lr_groups(config))
        optimizer.add_params({f"latent.{s}.shape": bundle.latents[s].shape for s in dataset.subjects})
        out = Path(out_dir)
        log = TrainLog(out / LOG_NAME)
        checkpoint = str(out / CHECKPOINT_NAME)
        weights = config.losses
        terms: Dict[str, float] = {}

        bar = tqdm(range(1, config.train.steps + 1), desc="train-prior", disable=not config.train.progress)
        for step in bar:
            frame = frames[int(rng.integers(len(frames)))]
            code = bundle.latents[frame.subject]
            cloud = scans[frame.name]
            pick = rng.integers(0, len(cloud), size=min(config.train.surface_points_per_batch, len(cloud)))
            theta = Tensor(poses[frame.name])
            transforms = forward_kinematics(skeletons[frame.subject], theta)
            try:
                parts = prior_terms(cloud.points[pick], cloud.normals[pick],
                                    _FieldProbe(bundle.model, theta, code, transforms))
                parts.update(regularization_terms(bundle.model, rigs[frame.subject], theta, code, transforms,
                                                  cloud.points, config, rng))
                parts["reg"] = loss_reg(code.shape)
                total = weighted_total(parts, weights)
            except NonFiniteError as e:
                raise DivergenceError(step, terms or {"error": float("nan")}) from e
            terms = _scalar_terms(parts)
            if not np.isfinite(total.item()):
                raise DivergenceError(step, terms)

            params = dict(geometry)
            params[f"latent.{frame.subject}.shape"] = code.shape
            grads = backward(total, list(params.values()))
            optimizer.step(dict(zip(params.keys(), grads)))

            if step % config.train.log_every == 0 or step == config.train.steps:
                log.write(step, terms, total.item())
                bar.set_postfix(total=f"{total.item():.4g}")
            if step % config.train.checkpoint_every == 0 and step != config.train.steps:
                save_bundle(checkpoint, bundle, {"kind": "prior", "step": step})

        save_bundle(checkpoint, bundle, {"kind": "prior", "step": config.train.steps})
        result = TrainResult(checkpoint, str(log.path), config.train.steps, terms,
                             round(time.perf_counter() - log.start, 3))
        logger.info(f"Prior training finished: {result.to_dict()}")
        self.last_result = result
        return result

    # -- full training on images -------------------------------------------------
    def train_full(self, dataset: Dataset, config: RunConfig, out_dir: str,
                   init_checkpoint: Optional[str] = None) -> TrainResult:
        """Train every parameter on posed images: λ_col L_col + λ_Eik L_Eik + λ_w L_w + λ_reg L_reg.

        Per-frame poses start at the dataset estimates and stay fixed for the
        first ``pose_freeze_fraction`` of the steps; per-camera gain and bias
        are trained throughout.
        """
        views: List[Tuple[FrameRecord, ViewRecord]] = [(f, v) for f in dataset.frames for v in f.views]
        if not views:
            raise ValueError(f"Dataset at {dataset.root} has no images to train on")
        rng = np.random.default_rng(config.seed)
        bundle = load_bundle(init_checkpoint) if init_checkpoint else ModelBundle.fresh(dataset.skeleton, config)
        bundle.config = config
        for subject in dataset.subjects:
            bundle.latents.add(subject)
        for cam in dataset.cameras:
            bundle.calibration.add(cam)
        for frame in dataset.frames:
            bundle.pose_param(frame.name, dataset.pose(frame))
        rigs = {s: reference_rig(dataset, s) for s in dataset.subjects}
        skeletons = {s: dataset.subject_skeleton(s) for s in dataset.subjects}

        optimizer = Adam(bundle.model.params, lr=config.train.lr_network, lr_groups=_lr_groups(config))
        optimizer.add_params(bundle.latents.parameters())
        optimizer.add_params(bundle.calibration.params)
        optimizer.add_params(bundle.poses)
        freeze_steps = int(np.floor(config.train.pose_freeze_fraction * config.train.steps))
        pose_names = list(bundle.poses)
        if freeze_steps > 0:
            optimizer.freeze(pose_names)
            logger.info(f"Poses frozen for the first {freeze_steps} steps")

        images: Dict[str, np.ndarray] = {}
        out = Path(out_dir)
        log = TrainLog(out / LOG_NAME)
        checkpoint = str(out / CHECKPOINT_NAME)
        terms: Dict[str, float] = {}

        bar = tqdm(range(1, config.train.steps + 1), desc="train", disable=not config.train.progress)
        for step in bar:
            if step == freeze_steps + 1 and freeze_steps > 0:
                optimizer.unfreeze(pose_names)
                logger.info(f"Poses released at step {step}")
            frame, view = views[int(rng.integers(len(views)))]
            if view.image not in images:
                images[view.image] = dataset.image(view)
            image = images[view.image]
            camera = dataset.cameras[view.camera]
            pixels = np.stack([rng.integers(0, camera.width, size=config.train.rays_per_batch),
                               rng.integers(0, camera.height, size=config.train.rays_per_batch)], axis=-1)
            target = image[pixels[:, 1], pixels[:, 0]]
            code = bundle.latents[frame.subject]
            theta = bundle.poses[f"pose.{frame.name}"]
            gain, bias = bundle.calibration.get(view.camera)
            try:
                transforms = forward_kinematics(skeletons[frame.subject], theta)
                rays = generate_rays(camera, pixels)
                rendered = render_rays(bundle.model, rays, theta, code, config.render, transforms, rng,
                                       calibration=(gain, bias), skeleton=skeletons[frame.subject])
                parts = {"col": loss_color(rendered.rgb, target)}
                seeds = _surface_seeds(rays, rendered, transforms)
                parts.update(regularization_terms(bundle.model, rigs[frame.subject], theta, code, transforms,
                                                  seeds, config, rng))
                parts["reg"] = loss_reg(code.shape, code.color)
                total = weighted_total(parts, config.losses)
            except NonFiniteError as e:
                raise DivergenceError(step, terms or {"error": float("nan")}) from e
            terms = _scalar_terms(parts)
            if not np.isfinite(total.item()):
                raise DivergenceError(step, terms)

            params = dict(bundle.model.params)
            params[f"latent.{frame.subject}.shape"] = code.shape
            params[f"latent.{frame.subject}.color"] = code.color
            params[f"calib.{view.camera}.gain"] = gain
            params[f"calib.{view.camera}.bias"] = bias
            params[f"pose.{frame.name}"] = theta
            grads = backward(total, list(params.values()))
            optimizer.step(dict(zip(params.keys(), grads)))

            if step % config.train.log_every == 0 or step == config.train.steps:
                log.write(step, terms, total.item())
                bar.set_postfix(total=f"{total.item():.4g}")
            if step % config.train.checkpoint_every == 0 and step != config.train.steps:
                save_bundle(checkpoint, bundle, {"kind": "full", "step": step})

        save_bundle(checkpoint, bundle, {"kind": "full", "step": config.train.steps})
        result = TrainResult(checkpoint, str(log.path), config.train.steps, terms,
                             round(time.perf_counter() - log.start, 3))
        logger.info(f"Full training finished: {result.to_dict()}")
        self.last_result = result
        return result


def _surface_seeds(rays, rendered, transforms: BoneTransforms) -> np.ndarray:
    """Expected surface points of opaque rays; joint positions when nothing was hit."""
    opacity = rendered.opacity.data
    solid = opacity > 0.5
    if np.any(solid):
        depth = rendered.depth.data[solid] / opacity[solid]
        return rays.origins[solid] + depth[:, None] * rays.directions[solid]
    return transforms.translations.data.copy()
