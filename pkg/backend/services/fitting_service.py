"""
Fitting Service for ArtiField
Handles inference-time fitting of a trained model: pose and shape to a point
cloud, or pose, shape and appearance to posed images with 2D joint detections.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..config import FitConfig, LossWeights, RenderConfig
from ..core.errors import DivergenceError, NonFiniteError
from ..core.implicit_model import ImplicitModel, LatentCode
from ..core.kinematics import PoseLike, Skeleton, as_pose, forward_kinematics, skeleton_bounds
from ..core.losses import loss_color, loss_reg
from ..core.optim import Adam
from ..core.rendering import Camera, camera_depths, generate_rays, project, ray_box_intersect, render_rays
from ..core.tensor import ArrayLike, Tensor, backward, getitem, mean, mul, parameter, tabs, tsum
from .storage_service import Dataset, read_cloud, read_pose
from .training_service import load_bundle

logger = logging.getLogger(__name__)

REPORT_NAME = "fit_report.json"
HISTORY_NAME = "loss_history.csv"
MIN_DEPTH = 1e-6


@dataclass
class ImageObservation:
    """One view of the frame being fitted."""

    camera: Camera
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    joints: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"Image shape {self.image.shape} does not match camera "
                             f"{self.camera.name} ({self.camera.height}x{self.camera.width})")
        if self.mask is not None:
            self.mask = np.asarray(self.mask) > 0.5
            if self.mask.shape != self.image.shape[:2]:
                raise ValueError(f"Mask shape {self.mask.shape} does not match camera "
                                 f"{self.camera.name} ({self.camera.height}x{self.camera.width})")
        if self.joints is not None:
            self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
            inside = ((self.joints[:, 0] >= 0) & (self.joints[:, 0] <= self.camera.width)
                      & (self.joints[:, 1] >= 0) & (self.joints[:, 1] <= self.camera.height))
            outside = (self.joints[:, 2] > 0) & ~inside
            if np.any(outside):
                raise ValueError(f"{int(outside.sum())} joint detection(s) fall outside the image "
                                 f"of camera {self.camera.name}")


@dataclass
class FitReport:
    mode: str
    iterations: int
    final_terms: Dict[str, float]
    pose: np.ndarray
    shape_code: np.ndarray
    color_code: Optional[np.ndarray] = None
    loss_history: List[Dict[str, Any]] = field(default_factory=list)
    stages: Dict[str, int] = field(default_factory=dict)
    skipped_joints: int = 0
    runtime_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "iterations": self.iterations,
            "final_terms": self.final_terms,
            "pose": self.pose.tolist(),
            "shape_code": self.shape_code.tolist(),
            "color_code": None if self.color_code is None else self.color_code.tolist(),
            "stages": self.stages,
            "skipped_joints": self.skipped_joints,
            "runtime_s": self.runtime_s,
        }

    def code(self, fallback_color: Optional[np.ndarray] = None) -> LatentCode:
        color = self.color_code if self.color_code is not None else fallback_color
        if color is None:
            color = np.zeros_like(self.shape_code)
        return LatentCode.from_arrays(self.shape_code, color, trainable=False)

    def save(self, out_dir: str) -> Path:
        """Write the report JSON and the per-iteration loss history CSV."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / REPORT_NAME, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        columns = sorted({k for row in self.loss_history for k in row} - {"iteration", "stage"})
        with open(out / HISTORY_NAME, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "stage", *columns])
            for row in self.loss_history:
                writer.writerow([row["iteration"], row["stage"], *[row.get(c, "") for c in columns]])
        return out / REPORT_NAME

    @classmethod
    def load(cls, path: str) -> "FitReport":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        color = data.get("color_code")
        return cls(
            mode=data["mode"],
            iterations=int(data["iterations"]),
            final_terms=dict(data.get("final_terms", {})),
            pose=np.asarray(data["pose"], dtype=np.float64),
            shape_code=np.asarray(data["shape_code"], dtype=np.float64),
            color_code=None if color is None else np.asarray(color, dtype=np.float64),
            stages=dict(data.get("stages", {})),
            skipped_joints=int(data.get("skipped_joints", 0)),
            runtime_s=float(data.get("runtime_s", 0.0)),
        )


def joints_3d(pose: PoseLike, skeleton: Skeleton) -> Tensor:
    """World joint positions (n_j, 3) from forward kinematics, differentiable w.r.t. the pose."""
    return forward_kinematics(skeleton, pose).translations


def _visible_joints(detections: np.ndarray, joints: np.ndarray, camera: Camera) -> Tuple[np.ndarray, int]:
    confident = detections[:, 2] > 0
    in_front = camera_depths(joints, camera) > MIN_DEPTH
    return confident & in_front, int(np.sum(confident & ~in_front))


def joint_loss_terms(observations: Sequence[Tuple[np.ndarray, Camera]], joints: Tensor) -> Tuple[Tensor, int]:
    """Σ over views and joints of confidence · |Ĵ - π(J)|₁, and the count of joints behind a camera."""
    total = Tensor(np.array(0.0))
    skipped = 0
    for detections, camera in observations:
        detections = np.asarray(detections, dtype=np.float64).reshape(-1, 3)
        if len(detections) != joints.shape[0]:
            raise ValueError(f"Detections for camera {camera.name} have {len(detections)} joints, "
                             f"skeleton has {joints.shape[0]}")
        use, behind = _visible_joints(detections, joints.data, camera)
        skipped += behind
        if not np.any(use):
            continue
        uv = project(getitem(joints, use), camera)
        residual = tabs(uv - Tensor(detections[use, :2]))
        total = total + tsum(mul(residual, Tensor(detections[use, 2:3])))
    return total, skipped


def loss_joints(detections: ArrayLike, pose: PoseLike, skeleton: Skeleton,
                camera: Camera) -> Tensor:
    """L1 pixel distance between detections and projected joints, summed over joints."""
    loss, skipped = joint_loss_terms([(np.asarray(detections), camera)], joints_3d(pose, skeleton))
    if skipped:
        logger.warning(f"{skipped} joint(s) behind camera {camera.name} excluded from the joint loss")
    return loss


def sample_view_pixels(view: ImageObservation, n: int, mask_fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    """``n`` (column, row) pixels of a view; a ``mask_fraction`` share is drawn inside its mask.

    Views without a mask, or with an empty one, are sampled uniformly.
    """
    n_inside = int(round(n * mask_fraction)) if view.mask is not None else 0
    inside = np.argwhere(view.mask) if n_inside else np.zeros((0, 2), dtype=np.int64)
    if len(inside) == 0:
        n_inside = 0
    uniform = np.stack([rng.integers(0, view.camera.width, size=n - n_inside),
                        rng.integers(0, view.camera.height, size=n - n_inside)], axis=-1)
    if not n_inside:
        return uniform
    picked = inside[rng.integers(0, len(inside), size=n_inside)][:, ::-1]
    return np.concatenate([picked, uniform], axis=0)


def _check_finite(step: int, terms: Dict[str, float]) -> None:
    if not all(np.isfinite(v) for v in terms.values()):
        raise DivergenceError(step, terms)


class FittingService:
    """Service for fitting trained models to new observations"""

    def __init__(self, render_config: Optional[RenderConfig] = None, loss_weights: Optional[LossWeights] = None):
        self.render_config = render_config or RenderConfig()
        self.loss_weights = loss_weights or LossWeights()

    def fit_cloud(self, model: ImplicitModel, points: np.ndarray, init_code: LatentCode,
                  init_pose: Optional[PoseLike] = None, config: Optional[FitConfig] = None,
                  seed: int = 0, skeleton: Optional[Skeleton] = None) -> FitReport:
        """Fit pose θ and shape code β+ so the cloud lies on the zero level set.

        Objective: mean |G(x, θ, β+)| over a random subset of points plus
        ``cloud_reg`` · ‖β+‖₂. An optional pose-only warm-up runs first.

        Args:
            model: trained model
            points: (N, 3) observed cloud in meters
            init_code: starting latent code (e.g. the table mean)
            init_pose: starting pose, rest pose when omitted
            skeleton: kinematic skeleton to pose, defaults to the model's

        Returns:
            FitReport with one history row per iteration
        """
        config = config or FitConfig()
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("Cannot fit an empty point cloud")
        if len(points) < config.min_points:
            raise ValueError(f"Point cloud has {len(points)} points, fitting needs at least {config.min_points}")
        skeleton = skeleton or model.skeleton
        rng = np.random.default_rng(seed)
        theta = parameter(as_pose(skeleton, init_pose).data, name="pose")
        beta = parameter(init_code.shape.data, name="latent.shape")
        optimizer = Adam({"pose": theta, "latent.shape": beta}, lr=config.lr_pose,
                         lr_groups={"latent.": config.lr_latent})
        history: List[Dict[str, Any]] = []
        terms: Dict[str, float] = {}
        start = time.perf_counter()
        stages = {"warmup": config.cloud_pose_warmup, "cloud": config.cloud_steps}
        schedule = ["warmup"] * config.cloud_pose_warmup + ["cloud"] * config.cloud_steps

        for it, stage in enumerate(tqdm(schedule, desc="fit-cloud", disable=not config.progress), start=1):
            if len(points) > config.cloud_points_per_iter:
                batch = points[rng.choice(len(points), config.cloud_points_per_iter, replace=False)]
            else:
                batch = points
            try:
                transforms = forward_kinematics(skeleton, theta)
                sdf = model.eval_sdf(batch, theta, beta, transforms).sdf
                parts = {"data": mean(tabs(sdf)), "reg": loss_reg(beta)}
                total = parts["data"] + config.cloud_reg * parts["reg"]
            except NonFiniteError as e:
                raise DivergenceError(it, terms or {"error": float("nan")}) from e
            terms = {name: value.item() for name, value in parts.items()}
            terms["total"] = total.item()
            _check_finite(it, terms)
            history.append({"iteration": it, "stage": stage, **terms})

            names = ["pose"] if stage == "warmup" else ["pose", "latent.shape"]
            grads = backward(total, [optimizer.params[n] for n in names])
            optimizer.step(dict(zip(names, grads)))

        report = FitReport("cloud", len(schedule), terms, theta.data.copy(), beta.data.copy(),
                           init_code.color.data.copy(), history, stages,
                           runtime_s=round(time.perf_counter() - start, 3))
        logger.info(f"Cloud fit finished after {report.iterations} iterations: {terms}")
        return report

    def fit_images(self, model: ImplicitModel, views: Sequence[ImageObservation], init_code: LatentCode,
                   init_pose: Optional[PoseLike] = None, config: Optional[FitConfig] = None,
                   seed: int = 0, calibration: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   skeleton: Optional[Skeleton] = None, render_config: Optional[RenderConfig] = None,
                   loss_weights: Optional[LossWeights] = None) -> FitReport:
        """Two-stage image fit.

        Stage 1 moves only the pose under the joint loss. Stage 2 moves pose,
        shape code and color code under the color, latent-norm and joint
        losses, with ``rays_per_iter`` random pixels of one view per iteration,
        a ``mask_fraction`` share of them inside the view's mask.
        """
        config = config or FitConfig()
        if not views:
            raise ValueError("fit_images needs at least one view")
        skeleton = skeleton or model.skeleton
        rng = np.random.default_rng(seed)
        weights = loss_weights or self.loss_weights
        render_config = render_config or self.render_config
        theta = parameter(as_pose(skeleton, init_pose).data, name="pose")
        beta = parameter(init_code.shape.data, name="latent.shape")
        gamma = parameter(init_code.color.data, name="latent.color")
        optimizer = Adam({"pose": theta, "latent.shape": beta, "latent.color": gamma},
                         lr=config.lr_pose, lr_groups={"latent.": config.lr_latent})
        detections = [(v.joints, v.camera) for v in views if v.joints is not None]
        if not detections and not self._overlaps(views, theta, skeleton, render_config.bbox_padding):
            raise ValueError("No joint detections and no view sees the model; nothing to fit")

        pose_steps = config.pose_steps if detections else 0
        if config.pose_steps and not detections:
            logger.warning("No joint detections given; skipping the pose-only stage")
        stages = {"pose": pose_steps, "joint": config.joint_steps}
        schedule = ["pose"] * pose_steps + ["joint"] * config.joint_steps
        history: List[Dict[str, Any]] = []
        terms: Dict[str, float] = {}
        skipped = 0
        start = time.perf_counter()

        for it, stage in enumerate(tqdm(schedule, desc="fit-images", disable=not config.progress), start=1):
            try:
                transforms = forward_kinematics(skeleton, theta)
                parts: Dict[str, Tensor] = {}
                if detections:
                    parts["joints"], skipped = joint_loss_terms(detections, transforms.translations)
                if stage == "joint":
                    view = views[(it - pose_steps - 1) % len(views)]
                    pixels = sample_view_pixels(view, config.rays_per_iter, config.mask_fraction, rng)
                    code = LatentCode(beta, gamma)
                    rendered = render_rays(model, generate_rays(view.camera, pixels), theta, code,
                                           render_config, transforms, rng, calibration=calibration,
                                           skeleton=skeleton)
                    parts["col"] = loss_color(rendered.rgb, view.image[pixels[:, 1], pixels[:, 0]])
                    parts["reg"] = loss_reg(beta, gamma)
                total = None
                for name, value in parts.items():
                    scaled = getattr(weights, name) * value
                    total = scaled if total is None else total + scaled
            except NonFiniteError as e:
                raise DivergenceError(it, terms or {"error": float("nan")}) from e
            terms = {name: value.item() for name, value in parts.items()}
            terms["total"] = total.item()
            _check_finite(it, terms)
            history.append({"iteration": it, "stage": stage, **terms})

            names = ["pose"] if stage == "pose" else ["pose", "latent.shape", "latent.color"]
            grads = backward(total, [optimizer.params[n] for n in names])
            optimizer.step(dict(zip(names, grads)))

        if skipped:
            logger.warning(f"{skipped} joint(s) behind a camera were excluded from the joint loss")
        report = FitReport("images", len(schedule), terms, theta.data.copy(), beta.data.copy(),
                           gamma.data.copy(), history, stages, skipped,
                           round(time.perf_counter() - start, 3))
        logger.info(f"Image fit finished after {report.iterations} iterations: {terms}")
        return report

    def _overlaps(self, views: Sequence[ImageObservation], theta: Tensor, skeleton: Skeleton,
                  padding: float) -> bool:
        transforms = forward_kinematics(skeleton, theta.detach())
        box = skeleton_bounds(transforms, skeleton.bone_segments(), padding)
        for view in views:
            corners = np.array([[0, 0], [view.camera.width - 1, 0], [0, view.camera.height - 1],
                                [view.camera.width - 1, view.camera.height - 1],
                                [view.camera.width // 2, view.camera.height // 2]])
            rays = generate_rays(view.camera, corners)
            if np.any(ray_box_intersect(rays.origins, rays.directions, box)[2]):
                return True
        return False

    # -- file-level workflows ---------------------------------------------------
    def run_cloud_fit(self, checkpoint: str, cloud_path: str, out_dir: str, config: Optional[FitConfig] = None,
                      subject: Optional[str] = None, init_pose: Optional[str] = None, seed: int = 0) -> FitReport:
        """Fit a checkpoint to a PLY cloud and write the report to ``out_dir``."""
        bundle = load_bundle(checkpoint)
        cloud = read_cloud(cloud_path)
        pose = read_pose(init_pose)[0] if init_pose else None
        report = self.fit_cloud(bundle.model, cloud.points, bundle.code_for(subject).detach(), pose,
                                config or bundle.config.fit, seed)
        report.save(out_dir)
        return report

    def run_image_fit(self, checkpoint: str, dataset: Dataset, frame: str, cameras: Sequence[str],
                      out_dir: str, config: Optional[FitConfig] = None, subject: Optional[str] = None,
                      init_pose: Optional[str] = None, seed: int = 0) -> FitReport:
        """Fit a checkpoint to selected views of a dataset frame and write the report."""
        bundle = load_bundle(checkpoint)
        record = next((f for f in dataset.frames if f.name == frame), None)
        if record is None:
            raise FileNotFoundError(f"Frame {frame} is not in dataset {dataset.root}")
        by_camera = {v.camera: v for v in record.views}
        missing = [c for c in cameras if c not in by_camera]
        if missing:
            raise ValueError(f"Frame {frame} has no views for cameras {missing}")
        views = []
        for name in cameras or sorted(by_camera):
            view = by_camera[name]
            mask = dataset.mask(view)
            views.append(ImageObservation(dataset.cameras[name], dataset.image(view),
                                          mask[..., 0] if mask.ndim == 3 else mask, dataset.joints(view)))
        pose = read_pose(init_pose)[0] if init_pose else None
        report = self.fit_images(bundle.model, views, bundle.code_for(subject).detach(), pose,
                                 config or bundle.config.fit, seed, bundle.calibration.mean(),
                                 render_config=bundle.config.render, loss_weights=bundle.config.losses)
        report.save(out_dir)
        return report
