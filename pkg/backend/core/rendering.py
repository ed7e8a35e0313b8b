"""
Rendering for ArtiField
Pinhole cameras, ray generation, SDF-to-density conversion and volume
rendering quadrature with per-camera color calibration.

Cameras follow the OpenCV convention: x right, y down, z forward;
x_cam = R x_world + t; pixel (u, v) has its center at (u + 0.5, v + 0.5).
"""

import colorsys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import RenderConfig
from .errors import ShapeError
from .implicit_model import ImplicitModel, LatentCode
from .kinematics import BoneTransforms, PoseLike, Skeleton, as_pose, forward_kinematics, skeleton_bounds
from .tensor import (
    ArrayLike, Tensor, as_tensor, div, enable_grad, exp, grad, matmul, mul, no_grad,
    parameter, reshape, scatter, stack, tabs, tsum,
)

logger = logging.getLogger(__name__)

RENDER_MODES = ("color", "normals", "weights")
ORTHONORMAL_TOL = 1e-6


@dataclass
class Camera:
    """Pinhole camera with world→camera extrinsics and optional color calibration."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gain: np.ndarray = field(default_factory=lambda: np.ones(3))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = "camera"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(3)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Camera {self.name}: focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Camera {self.name}: image size must be positive, got {self.width}x{self.height}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL or np.linalg.det(self.rotation) <= 0:
            raise ValueError(f"Camera {self.name}: rotation is not a proper orthonormal matrix (error {err:.2e})")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 1.0, 0.0),
                width: int = 128, height: int = 128, fov_deg: float = 40.0, name: str = "camera") -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError(f"Camera {name}: view direction is parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(focal, focal, width / 2.0, height / 2.0, width, height,
                   rotation, -rotation @ eye, name=name)

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy},
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "gain": self.gain.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Camera":
        try:
            intr = data["intrinsics"]
            return cls(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                       int(data["width"]), int(data["height"]),
                       data.get("rotation", np.eye(3)), data.get("translation", np.zeros(3)),
                       data.get("gain", np.ones(3)), data.get("bias", np.zeros(3)),
                       name=str(data.get("name", "camera")))
        except (KeyError, TypeError) as e:
            raise ValueError(f"Malformed camera description: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Camera":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Camera file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


def ring_cameras(n: int, distance: float, height: float, target: Sequence[float],
                 width: int = 128, image_height: int = 128, fov_deg: float = 40.0) -> List[Camera]:
    """``n`` cameras evenly spaced on a horizontal ring around ``target``, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    cameras = []
    for k in range(n):
        angle = 2.0 * np.pi * k / n
        eye = target + np.array([distance * np.sin(angle), height, distance * np.cos(angle)])
        cameras.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), width, image_height, fov_deg,
                                      name=f"cam{k:02d}"))
    return cameras


@dataclass
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    depths: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None
    hit: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, mask: np.ndarray) -> "RayBundle":
        pick = lambda a: None if a is None else a[mask]
        return RayBundle(self.origins[mask], self.directions[mask], self.near[mask], self.far[mask],
                         pick(self.depths), pick(self.pixels), pick(self.hit))


def density(s: ArrayLike, alpha: ArrayLike, beta: ArrayLike) -> Tensor:
    """σ = α Ψ_β(−s), Ψ_β the CDF of a zero-mean Laplace distribution with scale β."""
    u = -as_tensor(s)
    sign = np.sign(u.data)
    tail = exp(-div(tabs(u), beta))
    return mul(alpha, 0.5 + mul(0.5 * sign, 1.0 - tail))


def unproject(camera: Camera, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World ray origins and unit directions through continuous pixel positions (M, 2)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    dirs_cam = np.stack([(uv[:, 0] - camera.cx) / camera.fx,
                         (uv[:, 1] - camera.cy) / camera.fy,
                         np.ones(uv.shape[0])], axis=-1)
    dirs = dirs_cam @ camera.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def stratified_depths(near: np.ndarray, far: np.ndarray, n: int,
                      rng: Optional[np.random.Generator] = None, perturb: bool = True) -> np.ndarray:
    """One depth per stratum of [near, far] split into ``n`` equal parts: (M, n)."""
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if perturb:
        if rng is None:
            raise ValueError("stratified sampling with perturbation needs a random generator")
        offsets = rng.uniform(0.0, 1.0, size=(near.shape[0], n))
    else:
        offsets = np.full((near.shape[0], n), 0.5)
    return near + (far - near) * (np.arange(n)[None, :] + offsets) / n


def ray_box_intersect(origins: np.ndarray, directions: np.ndarray, box: np.ndarray,
                      min_near: float = 1e-4) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test against an axis-aligned box (2, 3): near, far, hit mask."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box[0] - origins) * inv
        t1 = (box[1] - origins) * inv
    t_lo = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    t_hi = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(t_lo.max(axis=-1), min_near)
    far = t_hi.min(axis=-1)
    hit = far > near
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 1.0)
    return near, far, hit


def generate_rays(camera: Camera, pixels: np.ndarray, bounds: Optional[np.ndarray] = None,
                  n_samples: int = 0, rng: Optional[np.random.Generator] = None,
                  perturb: bool = True, near: float = 1e-3, far: float = 2.0) -> RayBundle:
    """Rays through integer pixel centers (M, 2) given as (column, row).

    With ``bounds`` the near/far range comes from the ray-box intersection,
    otherwise the fixed ``near``/``far`` are used. ``n_samples`` > 0 also fills
    stratified sample depths.
    """
    pixels = np.atleast_2d(np.asarray(pixels))
    if pixels.shape[-1] != 2:
        raise ShapeError(f"pixels must have shape (M, 2), got {pixels.shape}")
    cols, rows = pixels[:, 0], pixels[:, 1]
    bad = (cols < 0) | (cols >= camera.width) | (rows < 0) | (rows >= camera.height)
    if np.any(bad):
        first = pixels[np.argmax(bad)]
        raise IndexError(f"Pixel {tuple(int(v) for v in first)} is outside the {camera.width}x{camera.height} image")
    origins, dirs = unproject(camera, pixels.astype(np.float64) + 0.5)
    if bounds is not None:
        t_near, t_far, hit = ray_box_intersect(origins, dirs, bounds)
    else:
        t_near = np.full(len(origins), near)
        t_far = np.full(len(origins), far)
        hit = np.ones(len(origins), dtype=bool)
    rays = RayBundle(origins, dirs, t_near, t_far, pixels=pixels.astype(np.int64), hit=hit)
    if n_samples > 0:
        rays.depths = stratified_depths(t_near, t_far, n_samples, rng, perturb)
    return rays


def camera_depths(x_world: np.ndarray, camera: Camera) -> np.ndarray:
    return (np.atleast_2d(x_world) @ camera.rotation.T + camera.translation)[:, 2]


def project_points(x_world: np.ndarray, camera: Camera) -> np.ndarray:
    """Pinhole projection of (N, 3) world points to pixel coordinates (N, 2)."""
    x_cam = np.atleast_2d(np.asarray(x_world, dtype=np.float64)) @ camera.rotation.T + camera.translation
    if np.any(x_cam[:, 2] <= 0):
        raise ValueError(f"{int(np.sum(x_cam[:, 2] <= 0))} point(s) at or behind the plane of camera {camera.name}")
    return np.stack([camera.fx * x_cam[:, 0] / x_cam[:, 2] + camera.cx,
                     camera.fy * x_cam[:, 1] / x_cam[:, 2] + camera.cy], axis=-1)


def project(x_world: ArrayLike, camera: Camera) -> Tensor:
    """Differentiable pinhole projection, (N, 3) → (N, 2)."""
    x = as_tensor(x_world)
    if x.ndim == 1:
        x = reshape(x, (1, 3))
    x_cam = matmul(x, Tensor(camera.rotation.T)) + Tensor(camera.translation)
    z = x_cam[:, 2]
    if np.any(z.data <= 0):
        raise ValueError(f"{int(np.sum(z.data <= 0))} point(s) at or behind the plane of camera {camera.name}")
    u = div(mul(camera.fx, x_cam[:, 0]), z) + camera.cx
    v = div(mul(camera.fy, x_cam[:, 1]), z) + camera.cy
    return stack([u, v], axis=-1)


@dataclass
class Composite:
    rgb: Tensor
    opacity: Tensor
    weights: Tensor
    transmittance: Tensor


def sample_intervals(depths: np.ndarray, near: np.ndarray, far: np.ndarray) -> np.ndarray:
    """Length of the stretch of [t_n, t_f] each sample stands for: (M, S).

    Interval edges sit halfway between neighbouring samples, the first one at
    t_n and the last at t_f, so the lengths sum to t_f − t_n.
    """
    depths = np.asarray(depths, dtype=np.float64)
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    mids = 0.5 * (depths[:, 1:] + depths[:, :-1])
    edges = np.concatenate([np.broadcast_to(near, (depths.shape[0], 1)), mids,
                            np.broadcast_to(far, (depths.shape[0], 1))], axis=1)
    return np.maximum(np.diff(edges, axis=1), 0.0)


def composite(sigma: ArrayLike, colors: ArrayLike, depths: np.ndarray, near: np.ndarray, far: np.ndarray,
              background: Optional[Sequence[float]] = None) -> Composite:
    """Discrete volume rendering along M rays of S samples.

    δ_i from ``sample_intervals`` (midpoint edges closed at t_n and t_f);
    a_i = 1 − exp(−σ_i δ_i); T_i = exp(−Σ_{k<i} σ_k δ_k);
    rgb = Σ T_i a_i c_i + T_S · background.

    Args:
        sigma: (M, S) densities
        colors: (M, S, 3) sample colors
        depths: (M, S) increasing sample depths
        near: (M,) near bounds
        far: (M,) far bounds
        background: RGB composited behind the residual transmittance

    Returns:
        Composite with rgb (M, 3), opacity (M,), per-sample weights and
        transmittance (M, S)
    """
    sigma = as_tensor(sigma)
    colors = as_tensor(colors)
    depths = np.asarray(depths, dtype=np.float64)
    if sigma.shape != depths.shape or colors.shape != depths.shape + (3,):
        raise ShapeError(f"composite: sigma {sigma.shape}, colors {colors.shape}, depths {depths.shape} disagree")
    n_samples = depths.shape[1]
    deltas = sample_intervals(depths, near, far)
    optical = mul(sigma, deltas)
    before = np.triu(np.ones((n_samples, n_samples)), k=1)
    transmittance = exp(-matmul(optical, Tensor(before)))
    weights = mul(transmittance, 1.0 - exp(-optical))
    opacity = tsum(weights, axis=-1)
    rgb = tsum(mul(reshape(weights, weights.shape + (1,)), colors), axis=1)
    if background is not None:
        residual = exp(-tsum(optical, axis=-1))
        rgb = rgb + mul(reshape(residual, (-1, 1)), np.asarray(background, dtype=np.float64))
    return Composite(rgb, opacity, weights, transmittance)


def bone_palette(n_bones: int) -> np.ndarray:
    """Fixed, well-separated color per bone for weight visualizations."""
    golden = 0.618033988749895
    return np.array([colorsys.hsv_to_rgb((k * golden) % 1.0, 0.75, 0.95) for k in range(n_bones)])


class CalibrationTable:
    """Per-camera, per-channel gain and bias, trained jointly with the model."""

    def __init__(self, cameras: Sequence[str] = ()):
        self.params: Dict[str, Tensor] = {}
        for name in cameras:
            self.add(name)

    def add(self, camera: str) -> None:
        if f"calib.{camera}.gain" not in self.params:
            self.params[f"calib.{camera}.gain"] = parameter(np.ones(3), name=f"calib.{camera}.gain")
            self.params[f"calib.{camera}.bias"] = parameter(np.zeros(3), name=f"calib.{camera}.bias")

    @property
    def cameras(self) -> List[str]:
        return sorted(k[len("calib."):-len(".gain")] for k in self.params if k.endswith(".gain"))

    def get(self, camera: str) -> Tuple[Tensor, Tensor]:
        if f"calib.{camera}.gain" not in self.params:
            raise KeyError(f"No calibration for camera {camera}")
        return self.params[f"calib.{camera}.gain"], self.params[f"calib.{camera}.bias"]

    def mean(self) -> Tuple[np.ndarray, np.ndarray]:
        """Average gain and bias over cameras, used for renders from unseen views."""
        names = self.cameras
        if not names:
            return np.ones(3), np.zeros(3)
        gains = np.mean([self.params[f"calib.{n}.gain"].data for n in names], axis=0)
        biases = np.mean([self.params[f"calib.{n}.bias"].data for n in names], axis=0)
        return gains, biases

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name.startswith("calib."):
                self.params[name] = parameter(np.asarray(value, dtype=np.float64), name=name)


def apply_calibration(rgb: Tensor, gain: ArrayLike, bias: ArrayLike) -> Tensor:
    return mul(rgb, gain) + bias


@dataclass
class RenderOutput:
    """Per-ray results; misses carry the background color and zero opacity."""

    rgb: Tensor
    opacity: Tensor
    depth: Tensor
    hit: np.ndarray
    sample_points: np.ndarray
    sample_weights: Optional[Tensor] = None


def _fine_depths(coarse: np.ndarray, weights: np.ndarray, near: np.ndarray, far: np.ndarray, n_fine: int,
                 window: int, rng: Optional[np.random.Generator], perturb: bool) -> np.ndarray:
    # edges[k + 1] is coarse sample k; edges[0] and edges[-1] are the ray bounds
    n = coarse.shape[1]
    edges = np.concatenate([near.reshape(-1, 1), coarse, far.reshape(-1, 1)], axis=1)
    peak = weights.argmax(axis=1)
    rows = np.arange(coarse.shape[0])
    lo = edges[rows, np.clip(peak - window, 0, n + 1)]
    hi = edges[rows, np.clip(peak + window + 2, 0, n + 1)]
    fine = stratified_depths(lo, hi, n_fine, rng, perturb)
    return np.sort(np.concatenate([coarse, fine], axis=1), axis=1)


def _sample_colors(model: ImplicitModel, points: Tensor, dirs: np.ndarray, theta: Tensor,
                   code: LatentCode, transforms: BoneTransforms, mode: str):
    if mode == "color":
        sample = model.eval_field(points, dirs, theta, code.shape, code.color, transforms)
        return sample.sdf, sample.color
    if mode == "weights":
        sample = model.eval_sdf(points, theta, code.shape, transforms)
        return sample.sdf, matmul(sample.weights, Tensor(bone_palette(model.n_bones)))
    if mode == "normals":
        with enable_grad():
            x = parameter(points.data)
            sample = model.eval_sdf(x, theta.detach(), code.shape.detach(), transforms.detach())
            (normal,) = grad([sample.sdf], [x])
        unit = normal.data / np.maximum(np.linalg.norm(normal.data, axis=-1, keepdims=True), 1e-12)
        sdf = sample.sdf.detach()
        return sdf, Tensor(0.5 + 0.5 * unit)
    raise ValueError(f"Unknown render mode {mode!r}; expected one of {RENDER_MODES}")


def render_rays(model: ImplicitModel, rays: RayBundle, pose: Optional[PoseLike], code: LatentCode,
                config: Optional[RenderConfig] = None, transforms: Optional[BoneTransforms] = None,
                rng: Optional[np.random.Generator] = None, perturb: Optional[bool] = None,
                calibration: Optional[Tuple[ArrayLike, ArrayLike]] = None,
                mode: str = "color", skeleton: Optional[Skeleton] = None) -> RenderOutput:
    """Volume-render a ray bundle through the posed field.

    Near/far come from the pose-dependent box around ``skeleton`` (default:
    the model skeleton); rays missing it are background. Depths: stratified
    coarse samples, then fine samples around the interval of largest weight
    found by a gradient-free coarse pass.
    """
    config = config or RenderConfig()
    perturb = config.perturb if perturb is None else perturb
    skeleton = skeleton or model.skeleton
    theta = as_pose(model.skeleton, pose)
    if transforms is None:
        transforms = forward_kinematics(skeleton, theta)
    box = skeleton_bounds(transforms.detach(), skeleton.bone_segments(), config.bbox_padding)
    near, far, hit = ray_box_intersect(rays.origins, rays.directions, box)
    background = np.asarray(config.background, dtype=np.float64)
    n_rays = len(rays)
    idx = np.nonzero(hit)[0]

    if idx.size == 0:
        return RenderOutput(Tensor(np.broadcast_to(background, (n_rays, 3)).copy()), Tensor(np.zeros(n_rays)),
                            Tensor(np.zeros(n_rays)), hit, np.zeros((0, 3)))

    origins, dirs = rays.origins[idx], rays.directions[idx]
    t_near, t_far = near[idx], far[idx]
    depths = stratified_depths(t_near, t_far, config.n_coarse, rng, perturb)
    if config.n_fine > 0:
        with no_grad():
            pts = (origins[:, None, :] + depths[..., None] * dirs[:, None, :]).reshape(-1, 3)
            coarse_s = model.eval_sdf(pts, theta.detach(), code.shape.detach(), transforms.detach()).sdf
            sigma = density(reshape(coarse_s, depths.shape), model.alpha, model.beta)
            coarse_w = composite(sigma, np.zeros(depths.shape + (3,)), depths, t_near, t_far).weights.data
        depths = _fine_depths(depths, coarse_w, t_near, t_far, config.n_fine, config.fine_window, rng, perturb)

    n_hit, n_samples = depths.shape
    points = (origins[:, None, :] + depths[..., None] * dirs[:, None, :]).reshape(-1, 3)
    view = np.repeat(dirs, n_samples, axis=0)
    sdf, colors = _sample_colors(model, Tensor(points), view, theta, code, transforms, mode)
    sigma = density(reshape(sdf, (n_hit, n_samples)), model.alpha, model.beta)
    result = composite(sigma, reshape(colors, (n_hit, n_samples, 3)), depths, t_near, t_far, background)

    rgb = result.rgb
    if calibration is not None and mode == "color":
        rgb = apply_calibration(rgb, *calibration)
    depth = tsum(mul(result.weights, depths), axis=-1)

    miss = (~hit).astype(np.float64)
    full_rgb = scatter(rgb, (n_rays, 3), idx) + miss[:, None] * background
    full_opacity = scatter(result.opacity, (n_rays,), idx)
    full_depth = scatter(depth, (n_rays,), idx)
    return RenderOutput(full_rgb, full_opacity, full_depth, hit, points, result.weights)


def render_ray(model: ImplicitModel, origin: Sequence[float], direction: Sequence[float],
               pose: Optional[PoseLike], code: LatentCode, config: Optional[RenderConfig] = None,
               calibration: Optional[Tuple[ArrayLike, ArrayLike]] = None,
               rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """Single-ray convenience wrapper: (rgb (3,), opacity scalar)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    rays = RayBundle(np.asarray(origin, dtype=np.float64)[None], d[None], np.zeros(1), np.ones(1))
    out = render_rays(model, rays, pose, code, config, rng=rng, perturb=False if rng is None else None,
                      calibration=calibration)
    return out.rgb[0], out.opacity[0]


def image_pixels(camera: Camera) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)


def render_image(model: ImplicitModel, camera: Camera, pose: Optional[PoseLike], code: LatentCode,
                 config: Optional[RenderConfig] = None, mode: str = "color",
                 calibration: Optional[Tuple[ArrayLike, ArrayLike]] = None,
                 skeleton: Optional[Skeleton] = None,
                 rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    """Render a full frame in chunks without recording gradients.

    ``skeleton`` overrides the model skeleton for posing (per-subject bone lengths).
    Sample depths are jittered when ``config.perturb`` is set and ``rng`` is given.

    Returns:
        {"rgb": (H, W, 3), "opacity": (H, W), "depth": (H, W)}; depth is the
        expected depth normalized by opacity, 0 where nothing was hit
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"Unknown render mode {mode!r}; expected one of {RENDER_MODES}")
    config = config or RenderConfig()
    perturb = config.perturb and rng is not None
    pixels = image_pixels(camera)
    rgb = np.zeros((len(pixels), 3))
    opacity = np.zeros(len(pixels))
    depth = np.zeros(len(pixels))
    with no_grad():
        theta = as_pose(model.skeleton, pose).detach()
        transforms = forward_kinematics(skeleton or model.skeleton, theta)
        for start in range(0, len(pixels), config.chunk):
            chunk = pixels[start:start + config.chunk]
            rays = generate_rays(camera, chunk)
            out = render_rays(model, rays, theta, code.detach(), config, transforms, rng,
                              perturb=perturb, calibration=calibration, mode=mode, skeleton=skeleton)
            rgb[start:start + len(chunk)] = out.rgb.data
            opacity[start:start + len(chunk)] = out.opacity.data
            depth[start:start + len(chunk)] = out.depth.data
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(opacity > 1e-6, depth / opacity, 0.0)
    shape = (camera.height, camera.width)
    return {
        "rgb": np.clip(rgb, 0.0, 1.0).reshape(shape + (3,)),
        "opacity": opacity.reshape(shape),
        "depth": depth.reshape(shape),
    }
