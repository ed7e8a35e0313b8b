"""
Capsule oracle for ArtiField
An articulated smooth union of capsules with analytic SDF, gradient, color
and skinning weights, plus a sphere-tracing reference renderer. It is the
ground truth every learned quantity is checked against.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .kinematics import (
    BoneTransforms, Joint, PoseLike, Skeleton, forward_kinematics, lbs_weights_reference,
    posed_segments, skeleton_bounds,
)
from .rendering import Camera, image_pixels, ray_box_intersect, unproject

logger = logging.getLogger(__name__)

SURFACE_TOL = 1e-5
TRACE_STEPS = 256
AMBIENT = 0.35


@dataclass
class CapsuleRig:
    """One capsule per bone, blended by a log-sum-exp smooth minimum."""

    skeleton: Skeleton
    segments: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    smooth_radius: float = 0.005
    weight_sharpness: float = 50.0
    name: str = "rig"

    def __post_init__(self):
        n_b = self.skeleton.n_bones
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(n_b, 2, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(n_b)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n_b, 3)
        if np.any(self.radii <= 0):
            raise ValueError(f"Rig {self.name}: capsule radii must be positive")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError(f"Rig {self.name}: capsule colors must lie in [0, 1]")
        if self.smooth_radius <= 0:
            raise ValueError(f"Rig {self.name}: smooth_radius must be positive, got {self.smooth_radius}")

    @property
    def n_bones(self) -> int:
        return self.skeleton.n_bones

    @classmethod
    def default(cls, skeleton: Skeleton, palm_radius: float = 0.022, finger_radius: float = 0.0085,
                smooth_radius: float = 0.005, weight_sharpness: float = 50.0,
                name: str = "rig") -> "CapsuleRig":
        """Root bone gets the palm radius, the others taper slightly along each chain."""
        radii = np.zeros(skeleton.n_bones)
        depth = np.zeros(skeleton.n_bones, dtype=int)
        for j, joint in enumerate(skeleton.joints):
            if joint.parent < 0:
                radii[j] = palm_radius
                continue
            depth[j] = depth[joint.parent] + 1
            radii[j] = finger_radius * (1.0 - 0.1 * (depth[j] - 1))
        skin = np.array([0.87, 0.68, 0.56])
        colors = np.clip(skin[None, :] * (0.9 + 0.2 * np.linspace(0.0, 1.0, skeleton.n_bones))[:, None], 0, 1)
        return cls(skeleton, skeleton.bone_segments(), radii, colors, smooth_radius, weight_sharpness, name)

    def perturbed(self, rng: np.random.Generator, radius_jitter: float = 0.2, length_jitter: float = 0.1,
                  color_jitter: float = 0.08, name: Optional[str] = None) -> "CapsuleRig":
        """A new subject: per-bone radii, bone lengths and colors varied by a seeded perturbation."""
        scales = 1.0 + rng.uniform(-length_jitter, length_jitter, size=self.n_bones)
        scales[0] = 1.0
        joints = [Joint(j.name, j.parent, tuple(float(v) for v in np.asarray(j.offset) * scales[i]))
                  for i, j in enumerate(self.skeleton.joints)]
        skeleton = Skeleton(joints, name=self.skeleton.name)
        radii = self.radii * (1.0 + rng.uniform(-radius_jitter, radius_jitter, size=self.n_bones))
        tint = rng.uniform(-color_jitter, color_jitter, size=3)
        colors = np.clip(self.colors + tint[None, :] + rng.normal(0.0, color_jitter / 4, size=self.colors.shape),
                         0.0, 1.0)
        return CapsuleRig(skeleton, skeleton.bone_segments(), radii, colors, self.smooth_radius,
                          self.weight_sharpness, name or self.name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "skeleton": self.skeleton.to_dict(),
            "segments": self.segments.tolist(),
            "radii": self.radii.tolist(),
            "colors": self.colors.tolist(),
            "smooth_radius": self.smooth_radius,
            "weight_sharpness": self.weight_sharpness,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CapsuleRig":
        return cls(Skeleton.from_dict(data["skeleton"]), data["segments"], data["radii"], data["colors"],
                   float(data.get("smooth_radius", 0.005)), float(data.get("weight_sharpness", 50.0)),
                   str(data.get("name", "rig")))


@dataclass
class OracleSample:
    """Oracle values at N points: sdf (N,), gradient (N, 3), colors (N, 3), weights (N, n_b)."""

    sdf: np.ndarray
    gradient: np.ndarray
    colors: np.ndarray
    weights: np.ndarray

    @property
    def normals(self) -> np.ndarray:
        return self.gradient / np.maximum(np.linalg.norm(self.gradient, axis=-1, keepdims=True), 1e-12)


def capsule_distances(points: np.ndarray, rig: CapsuleRig,
                      transforms: BoneTransforms) -> Tuple[np.ndarray, np.ndarray]:
    """Signed distance to every posed capsule (N, n_b) and its unit gradient (N, n_b, 3)."""
    world = posed_segments(rig.segments, transforms)
    a, b = world[:, 0], world[:, 1]
    ab = b - a
    denom = np.maximum(np.einsum("bi,bi->b", ab, ab), 1e-18)
    ap = points[:, None, :] - a[None]
    h = np.clip(np.einsum("nbi,bi->nb", ap, ab) / denom, 0.0, 1.0)
    offset = ap - h[..., None] * ab[None]
    dist = np.linalg.norm(offset, axis=-1)
    direction = offset / np.maximum(dist, 1e-12)[..., None]
    return dist - rig.radii[None], direction


def oracle_sdf(x: np.ndarray, pose: Optional[PoseLike], rig: CapsuleRig,
               transforms: Optional[BoneTransforms] = None) -> OracleSample:
    """Smooth-min SDF with its analytic gradient; color and weights share the reference softmax.

    s = −ρ log Σ_j exp(−d_j / ρ), ∇s = Σ_j softmax(−d/ρ)_j ∇d_j
    """
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if transforms is None:
        transforms = forward_kinematics(rig.skeleton, pose).detach()
    d, dirs = capsule_distances(points, rig, transforms)
    rho = rig.smooth_radius
    d_min = d.min(axis=-1, keepdims=True)
    e = np.exp(-(d - d_min) / rho)
    total = e.sum(axis=-1, keepdims=True)
    sdf = (d_min - rho * np.log(total))[:, 0]
    blend = e / total
    gradient = np.einsum("nb,nbi->ni", blend, dirs)
    weights = lbs_weights_reference(points, rig, transforms)
    return OracleSample(sdf, gradient, weights @ rig.colors, weights)


@dataclass
class SurfaceSamples:
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def project_to_surface(points: np.ndarray, rig: CapsuleRig, transforms: BoneTransforms,
                       iterations: int = 20) -> Tuple[np.ndarray, np.ndarray]:
    """Newton steps x ← x − s ∇s / ‖∇s‖² onto the zero level set; returns points and final |s|."""
    x = np.array(points, dtype=np.float64, copy=True)
    for _ in range(iterations):
        sample = oracle_sdf(x, None, rig, transforms)
        g2 = np.maximum(np.einsum("ni,ni->n", sample.gradient, sample.gradient), 1e-12)
        x = x - (sample.sdf / g2)[:, None] * sample.gradient
    return x, np.abs(oracle_sdf(x, None, rig, transforms).sdf)


def sample_surface(rig: CapsuleRig, pose: Optional[PoseLike], n: int, rng: np.random.Generator,
                   tol: float = SURFACE_TOL) -> SurfaceSamples:
    """``n`` points on the posed zero level set with oracle normals, colors and weights.

    Seeds are drawn on the capsules (area-weighted by bone), then projected
    onto the smooth union; seeds that fail to converge are redrawn.
    """
    transforms = forward_kinematics(rig.skeleton, pose).detach()
    world = posed_segments(rig.segments, transforms)
    lengths = np.linalg.norm(world[:, 1] - world[:, 0], axis=-1)
    area = 2 * np.pi * rig.radii * lengths + 4 * np.pi * rig.radii ** 2
    prob = area / area.sum()
    kept = []
    count = 0
    for _ in range(20):
        m = max(2 * (n - count), 16)
        bones = rng.choice(rig.n_bones, size=m, p=prob)
        t = rng.uniform(0.0, 1.0, size=m)
        axis = world[bones, 0] + t[:, None] * (world[bones, 1] - world[bones, 0])
        dirs = rng.normal(size=(m, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        seeds = axis + rig.radii[bones, None] * dirs
        projected, residual = project_to_surface(seeds, rig, transforms)
        good = projected[residual < tol]
        kept.append(good)
        count += len(good)
        if count >= n:
            break
    points = np.concatenate(kept, axis=0)[:n]
    if len(points) < n:
        raise RuntimeError(f"Could only place {len(points)} of {n} surface samples on rig {rig.name}")
    sample = oracle_sdf(points, None, rig, transforms)
    return SurfaceSamples(points, sample.normals, sample.colors, sample.weights)


def rig_bounds(rig: CapsuleRig, transforms: BoneTransforms, padding: float = 0.0) -> np.ndarray:
    return skeleton_bounds(transforms, rig.segments, padding + float(rig.radii.max()))


def sphere_trace(origins: np.ndarray, dirs: np.ndarray, rig: CapsuleRig, transforms: BoneTransforms,
                 max_steps: int = TRACE_STEPS, tol: float = SURFACE_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """March each ray by the oracle distance; returns depth and hit mask."""
    box = rig_bounds(rig, transforms, padding=0.01)
    near, far, active = ray_box_intersect(origins, dirs, box)
    t = near.copy()
    hit = np.zeros(len(origins), dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active & ~hit)[0]
        if idx.size == 0:
            break
        s = oracle_sdf(origins[idx] + t[idx, None] * dirs[idx], None, rig, transforms).sdf
        converged = np.abs(s) < tol
        hit[idx[converged]] = True
        t[idx] = t[idx] + np.where(converged, 0.0, s)
        active[idx[t[idx] > far[idx]]] = False
    return np.where(hit, t, 0.0), hit


def oracle_render(camera: Camera, pose: Optional[PoseLike], rig: CapsuleRig,
                  light_dir: Sequence[float] = (0.3, -0.4, 0.85),
                  background: Sequence[float] = (1.0, 1.0, 1.0)) -> Dict[str, np.ndarray]:
    """Sphere-traced reference image with Lambertian shading of the blended capsule colors.

    Returns:
        {"rgb": (H, W, 3), "depth": (H, W) along-ray distance, "mask": (H, W) bool}
    """
    transforms = forward_kinematics(rig.skeleton, pose).detach()
    pixels = image_pixels(camera)
    origins, dirs = unproject(camera, pixels + 0.5)
    depth, hit = sphere_trace(origins, dirs, rig, transforms)
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(pixels), 3)).copy()
    if np.any(hit):
        points = origins[hit] + depth[hit, None] * dirs[hit]
        sample = oracle_sdf(points, None, rig, transforms)
        light = np.asarray(light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = np.clip(sample.normals @ light, 0.0, 1.0)
        rgb[hit] = sample.colors * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    shape = (camera.height, camera.width)
    return {"rgb": rgb.reshape(shape + (3,)), "depth": depth.reshape(shape), "mask": hit.reshape(shape)}
