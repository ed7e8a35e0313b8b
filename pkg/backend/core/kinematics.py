"""
Kinematics for ArtiField
Skeleton definition, axis-angle poses, forward kinematics, unposing and
linear blend skinning

Bone frames are centered at the proximal joint: bone ``j`` owns joint ``j``,
its frame origin is that joint's position and, at rest, its axes are the
world axes. There is one bone per joint.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError
from .tensor import (
    ArrayLike, Tensor, as_tensor, cos, matmul, mul, reshape, sin, sqrt, stack,
    swapaxes, tsum, where,
)

logger = logging.getLogger(__name__)

SKELETON_DIR = Path(__file__).resolve().parent.parent / "data" / "skeletons"
SMALL_ANGLE = 1e-6
LEAF_BONE_SCALE = 0.8

PoseLike = Union[Tensor, np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    offset: tuple


class Skeleton:
    """Topologically sorted joint tree with rest offsets in meters."""

    def __init__(self, joints: Sequence[Joint], name: str = "skeleton"):
        self.name = name
        self.joints: List[Joint] = list(joints)
        self._validate()
        self.parents = np.array([j.parent for j in self.joints], dtype=np.int64)
        self.offsets = np.array([j.offset for j in self.joints], dtype=np.float64)

    def _validate(self) -> None:
        if not self.joints:
            raise ValueError("Skeleton has no joints")
        roots = [i for i, j in enumerate(self.joints) if j.parent < 0]
        if roots != [0]:
            raise ValueError(f"Skeleton must have exactly one root at index 0, found roots at {roots}")
        for i, joint in enumerate(self.joints):
            if i > 0 and not 0 <= joint.parent < i:
                raise ValueError(
                    f"Joint {i} ({joint.name}) has parent {joint.parent}; parents must precede children"
                )
            if len(joint.offset) != 3:
                raise ValueError(f"Joint {i} ({joint.name}) offset must have 3 components")

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_bones(self) -> int:
        return len(self.joints)

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints

    def children(self, index: int) -> List[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]

    def rest_positions(self) -> np.ndarray:
        positions = np.zeros((self.n_joints, 3))
        for i, joint in enumerate(self.joints):
            base = positions[joint.parent] if joint.parent >= 0 else 0.0
            positions[i] = base + self.offsets[i]
        return positions

    def bone_segments(self) -> np.ndarray:
        """Default capsule axis per bone, in bone frame: (n_b, 2, 3).

        A bone runs from its joint to the mean of its children's offsets; a
        leaf bone continues along its own offset direction.
        """
        segments = np.zeros((self.n_bones, 2, 3))
        for i in range(self.n_bones):
            kids = self.children(i)
            if kids:
                segments[i, 1] = self.offsets[kids].mean(axis=0)
            else:
                segments[i, 1] = LEAF_BONE_SCALE * self.offsets[i]
        return segments

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "joints": [
                {"name": j.name, "parent": int(j.parent), "offset": [float(v) for v in j.offset]}
                for j in self.joints
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Skeleton":
        try:
            joints = [Joint(str(j["name"]), int(j["parent"]), tuple(float(v) for v in j["offset"]))
                      for j in data["joints"]]
        except (KeyError, TypeError) as e:
            raise ValueError(f"Malformed skeleton description: {e}") from e
        return cls(joints, name=str(data.get("name", "skeleton")))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Skeleton":
        path = Path(path)
        if not path.exists():
            bundled = SKELETON_DIR / f"{path.name}.json"
            if bundled.exists():
                path = bundled
            else:
                raise FileNotFoundError(f"Skeleton file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def bundled(cls, name: str = "hand16") -> "Skeleton":
        return cls.load(SKELETON_DIR / f"{name}.json")


def available_skeletons() -> List[str]:
    return sorted(p.stem for p in SKELETON_DIR.glob("*.json"))


@dataclass(frozen=True)
class BoneTransform:
    """Rigid map from a bone frame to the world: x = R x_bone + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass
class BoneTransforms:
    """All bone transforms of one posed skeleton, kept on the tape.

    rotations: (n_b, 3, 3), translations: (n_b, 3), local_rotations: the
    parent-relative joint rotations (n_b, 3, 3).
    """

    rotations: Tensor
    translations: Tensor
    local_rotations: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def __getitem__(self, index: int) -> BoneTransform:
        return BoneTransform(self.rotations.data[index].copy(), self.translations.data[index].copy())

    def detach(self) -> "BoneTransforms":
        local = self.local_rotations.detach() if self.local_rotations is not None else None
        return BoneTransforms(self.rotations.detach(), self.translations.detach(), local)


def as_pose(skeleton: Skeleton, pose: Optional[PoseLike]) -> Tensor:
    """Validate a pose and view it as an (n_j, 3) tensor (None means rest pose)."""
    if pose is None:
        return Tensor(np.zeros((skeleton.n_joints, 3)))
    pose = as_tensor(pose)
    if pose.size != skeleton.pose_dim:
        raise ShapeError(
            f"Pose has {pose.size} values, skeleton {skeleton.name} needs {skeleton.pose_dim}"
        )
    if pose.shape != (skeleton.n_joints, 3):
        pose = reshape(pose, (skeleton.n_joints, 3))
    return pose


def skew(v: Tensor) -> Tensor:
    """Cross-product matrices of (n, 3) vectors."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    zero = Tensor(np.zeros(v.shape[0]))
    rows = [zero, -z, y, z, zero, -x, -y, x, zero]
    return reshape(stack(rows, axis=-1), (v.shape[0], 3, 3))


def axis_angle_to_matrix(theta: ArrayLike) -> Tensor:
    """Rodrigues' formula for (n, 3) axis-angle vectors.

    Below SMALL_ANGLE the sin/cos ratios switch to their series so both the
    value and the gradient stay finite at zero rotation.
    """
    theta = as_tensor(theta)
    if theta.ndim == 1:
        theta = reshape(theta, (1, 3))
    n = theta.shape[0]
    angle_sq = tsum(theta * theta, axis=-1)
    small = angle_sq.data < SMALL_ANGLE ** 2
    safe_sq = where(small, 1.0, angle_sq)
    angle = sqrt(safe_sq)
    a = where(small, 1.0 - angle_sq / 6.0, sin(angle) / angle)
    b = where(small, 0.5 - angle_sq / 24.0, (1.0 - cos(angle)) / safe_sq)
    k = skew(theta)
    eye = Tensor(np.broadcast_to(np.eye(3), (n, 3, 3)))
    return eye + reshape(a, (n, 1, 1)) * k + reshape(b, (n, 1, 1)) * matmul(k, k)


def forward_kinematics(skeleton: Skeleton, pose: Optional[PoseLike] = None) -> BoneTransforms:
    """Bone-to-world transforms for a posed skeleton, differentiable w.r.t. the pose."""
    theta = as_pose(skeleton, pose)
    local = axis_angle_to_matrix(theta)
    rotations: List[Tensor] = []
    translations: List[Tensor] = []
    for j, joint in enumerate(skeleton.joints):
        r_local = local[j]
        offset = skeleton.offsets[j]
        if joint.parent < 0:
            rotations.append(r_local)
            translations.append(Tensor(offset))
        else:
            r_parent = rotations[joint.parent]
            rotations.append(matmul(r_parent, r_local))
            translations.append(matmul(r_parent, Tensor(offset)) + translations[joint.parent])
    return BoneTransforms(stack(rotations), stack(translations), local)


def skinning_transforms(skeleton: Skeleton, pose: Optional[PoseLike] = None) -> BoneTransforms:
    """Rest-world to posed-world transforms (posed ∘ rest⁻¹), as used by mesh LBS."""
    posed = forward_kinematics(skeleton, pose)
    rest = Tensor(skeleton.rest_positions())
    shift = reshape(matmul(posed.rotations, reshape(rest, (skeleton.n_bones, 3, 1))), (skeleton.n_bones, 3))
    return BoneTransforms(posed.rotations, posed.translations - shift, posed.local_rotations)


def unpose(x: ArrayLike, transforms: BoneTransforms) -> Tensor:
    """x_j = R_jᵀ (x − t_j) for every bone: (N, 3) points → (n_b, N, 3)."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = reshape(x, (1, 3))
    if x.shape[-1] != 3:
        raise ShapeError(f"unpose expects (N, 3) points, got {x.shape}")
    n_b = len(transforms)
    delta = reshape(x, (1, x.shape[0], 3)) - reshape(transforms.translations, (n_b, 1, 3))
    return matmul(delta, transforms.rotations)


def lbs_deform(vertices: ArrayLike, weights: ArrayLike, transforms: BoneTransforms) -> Tensor:
    """v_i = Σ_j w_ij T_j v̄_i"""
    vertices, weights = as_tensor(vertices), as_tensor(weights)
    n_b = len(transforms)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ShapeError(f"vertices must be (V, 3), got {vertices.shape}")
    if weights.shape != (vertices.shape[0], n_b):
        raise ShapeError(f"weights must be ({vertices.shape[0]}, {n_b}), got {weights.shape}")
    if not np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("Skinning weight rows must sum to 1")
    # (n_b, V, 3): every vertex moved rigidly by every bone
    moved = matmul(reshape(vertices, (1, -1, 3)), swapaxes(transforms.rotations, -1, -2))
    moved = moved + reshape(transforms.translations, (n_b, 1, 3))
    blend = reshape(swapaxes(weights, 0, 1), (n_b, -1, 1))
    return tsum(mul(moved, blend), axis=0)


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from (N, 3) points to the segment ab."""
    ab = b - a
    denom = float(ab @ ab)
    ap = points - a
    if denom == 0.0:
        return np.linalg.norm(ap, axis=-1)
    h = np.clip(ap @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(ap - h[:, None] * ab, axis=-1)


def posed_segments(segments: np.ndarray, transforms: BoneTransforms) -> np.ndarray:
    """Capsule axes (n_b, 2, 3) in bone frames → world frame."""
    rot = transforms.rotations.data
    trans = transforms.translations.data
    return np.einsum("bij,bkj->bki", rot, segments) + trans[:, None, :]


def lbs_weights_reference(x: np.ndarray, rig: Any, transforms: BoneTransforms,
                          sharpness: Optional[float] = None) -> np.ndarray:
    """Reference skinning weights: softmax over −k · distance to each capsule axis.

    ``rig`` supplies ``segments`` (n_b, 2, 3) in bone frames and a default
    ``weight_sharpness``.
    """
    k = rig.weight_sharpness if sharpness is None else sharpness
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    world = posed_segments(rig.segments, transforms)
    dist = np.stack([segment_distance(points, seg[0], seg[1]) for seg in world], axis=-1)
    logits = -k * dist
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def skeleton_bounds(transforms: BoneTransforms, segments: np.ndarray,
                    padding: float = 0.05) -> np.ndarray:
    """Axis-aligned box around the posed capsule axes, padded: (2, 3) [min, max]."""
    points = posed_segments(segments, transforms).reshape(-1, 3)
    return np.stack([points.min(axis=0) - padding, points.max(axis=0) + padding])


def random_pose(skeleton: Skeleton, rng: np.random.Generator, max_flex: float = 0.8,
                max_spread: float = 0.15, root_jitter: float = 0.2) -> np.ndarray:
    """Plausible hand-like pose: flexion about each bone's x axis, small spread and root jitter."""
    pose = np.zeros((skeleton.n_joints, 3))
    pose[0] = rng.uniform(-root_jitter, root_jitter, size=3)
    for j in range(1, skeleton.n_joints):
        pose[j, 0] = rng.uniform(0.0, max_flex)
        if skeleton.joints[j].parent == 0:
            pose[j, 2] = rng.uniform(-max_spread, max_spread)
    return pose


def joint_positions(skeleton: Skeleton, pose: Optional[PoseLike] = None) -> Tensor:
    """World positions of all joints, (n_j, 3)."""
    return forward_kinematics(skeleton, pose).translations
