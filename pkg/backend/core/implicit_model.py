"""
Implicit Model for ArtiField
Per-bone SDF and color networks, the skinning-weight network and the
blended field they produce for a posed skeleton.

Each bone network only ever sees its own unposed point x_j (positionally
encoded), the shape code (SDF and color nets), the color code (color nets)
and the bone's pose conditioning. The weight network sees the unposed points
and SDF predictions of all bones and outputs softmax weights; the blended SDF
and color are the weight-averaged per-bone values.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..config import ModelConfig
from .errors import ShapeError
from .kinematics import BoneTransforms, PoseLike, Skeleton, as_pose, forward_kinematics, unpose
from .tensor import (
    ArrayLike, Tensor, as_tensor, broadcast_to, concat, cos, matmul, mul, norm,
    parameter, reshape, sigmoid, sin, softmax, softplus, swapaxes, tsum,
)

logger = logging.getLogger(__name__)

SHAPE = "shape"
COLOR = "color"


def positional_encode(x: ArrayLike, n_freqs: int) -> Tensor:
    """[x, sin(2^k π x), cos(2^k π x)] for k = 0..n_freqs-1, along the last axis.

    Args:
        x: (..., 3) coordinates
        n_freqs: number of frequency bands L; 0 returns x unchanged

    Returns:
        (..., 3 + 6L) features
    """
    x = as_tensor(x)
    if n_freqs < 0:
        raise ValueError(f"n_freqs must be >= 0, got {n_freqs}")
    if n_freqs == 0:
        return x
    parts = [x]
    for k in range(n_freqs):
        scaled = mul(x, (2.0 ** k) * np.pi)
        parts.append(sin(scaled))
        parts.append(cos(scaled))
    return concat(parts, axis=-1)


def encoded_dim(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


def _inverse_softplus(value: float) -> float:
    return float(value + np.log(-np.expm1(-value)))


@dataclass
class LatentCode:
    """Auto-decoded shape (β+) and color (γ) codes of one subject."""

    shape: Tensor
    color: Tensor

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, std: float = 0.01,
               prefix: Optional[str] = None) -> "LatentCode":
        return cls(
            parameter(rng.normal(0.0, std, size=dim), name=f"{prefix}.{SHAPE}" if prefix else None),
            parameter(rng.normal(0.0, std, size=dim), name=f"{prefix}.{COLOR}" if prefix else None),
        )

    @classmethod
    def from_arrays(cls, shape: ArrayLike, color: ArrayLike, trainable: bool = True) -> "LatentCode":
        if trainable:
            return cls(parameter(as_tensor(shape).data), parameter(as_tensor(color).data))
        return cls(Tensor(as_tensor(shape).data), Tensor(as_tensor(color).data))

    @property
    def dim(self) -> int:
        return self.shape.shape[0]

    def detach(self) -> "LatentCode":
        return LatentCode(self.shape.detach(), self.color.detach())

    def copy(self) -> "LatentCode":
        return LatentCode.from_arrays(self.shape.data, self.color.data)


class LatentTable:
    """Per-subject latent codes, exposed as named parameters ``latent.<subject>.shape|color``."""

    def __init__(self, dim: int, init_std: float = 0.01, seed: int = 0):
        self.dim = dim
        self.init_std = init_std
        self._rng = np.random.default_rng(seed)
        self.codes: Dict[str, LatentCode] = {}

    def __contains__(self, subject: str) -> bool:
        return subject in self.codes

    def __getitem__(self, subject: str) -> LatentCode:
        if subject not in self.codes:
            raise KeyError(f"Unknown subject: {subject}")
        return self.codes[subject]

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def subjects(self) -> List[str]:
        return sorted(self.codes)

    def add(self, subject: str) -> LatentCode:
        if subject not in self.codes:
            self.codes[subject] = LatentCode.random(self.dim, self._rng, self.init_std,
                                                    prefix=f"latent.{subject}")
        return self.codes[subject]

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for subject in self.subjects:
            code = self.codes[subject]
            params[f"latent.{subject}.{SHAPE}"] = code.shape
            params[f"latent.{subject}.{COLOR}"] = code.color
        return params

    def mean_code(self) -> LatentCode:
        """Average code over subjects; zeros for an empty table. Used to start fits."""
        if not self.codes:
            return LatentCode.from_arrays(np.zeros(self.dim), np.zeros(self.dim))
        shapes = np.mean([c.shape.data for c in self.codes.values()], axis=0)
        colors = np.mean([c.color.data for c in self.codes.values()], axis=0)
        return LatentCode.from_arrays(shapes, colors)

    def interpolate(self, a: str, b: str, t: float) -> LatentCode:
        """(1 - t)·code_a + t·code_b, both parts."""
        ca, cb = self[a], self[b]
        return LatentCode.from_arrays((1.0 - t) * ca.shape.data + t * cb.shape.data,
                                      (1.0 - t) * ca.color.data + t * cb.color.data,
                                      trainable=False)

    def swap(self, shape_subject: str, color_subject: str) -> LatentCode:
        """Shape of one subject combined with the appearance of another."""
        return LatentCode.from_arrays(self[shape_subject].shape.data, self[color_subject].color.data,
                                      trainable=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        shapes: Dict[str, np.ndarray] = {}
        colors: Dict[str, np.ndarray] = {}
        for name, value in state.items():
            if not name.startswith("latent."):
                continue
            subject, part = name[len("latent."):].rsplit(".", 1)
            (shapes if part == SHAPE else colors)[subject] = np.asarray(value, dtype=np.float64)
        for subject in sorted(shapes):
            if subject not in colors:
                raise ValueError(f"Latent table entry {subject} has no color code")
            if shapes[subject].shape != (self.dim,):
                raise ShapeError(f"Latent code for {subject} has shape {shapes[subject].shape}, expected ({self.dim},)")
            self.codes[subject] = LatentCode(
                parameter(shapes[subject], name=f"latent.{subject}.{SHAPE}"),
                parameter(colors[subject], name=f"latent.{subject}.{COLOR}"),
            )


class BoneMLP:
    """One small MLP per bone, evaluated together with batched matmuls.

    Weights are (n_groups, fan_in, fan_out). The first layer is split into a
    point block applied to every query and a conditioning block applied once
    per group and broadcast over the queries.
    """

    def __init__(self, prefix: str, n_groups: int, point_dim: int, cond_dim: int,
                 hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 final_std: float = 0.0, final_bias: float = 0.0):
        self.prefix = prefix
        self.n_groups = n_groups
        self.point_dim = point_dim
        self.cond_dim = cond_dim
        self.dims = [point_dim + cond_dim] + list(hidden) + [out_dim]
        self.n_layers = len(self.dims) - 1
        self.params: Dict[str, Tensor] = {}

        for i in range(self.n_layers):
            fan_in, fan_out = self.dims[i], self.dims[i + 1]
            last = i == self.n_layers - 1
            std = final_std if last else np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=(n_groups, fan_in, fan_out)) if std > 0 else np.zeros((n_groups, fan_in, fan_out))
            b = np.full((n_groups, 1, fan_out), final_bias if last else 0.0)
            if i == 0:
                self._add(f"{i}.weight_points", w[:, :point_dim])
                if cond_dim:
                    self._add(f"{i}.weight_cond", w[:, point_dim:])
            else:
                self._add(f"{i}.weight", w)
            self._add(f"{i}.bias", b)

    def _add(self, key: str, value: np.ndarray) -> None:
        name = f"{self.prefix}.{key}"
        self.params[name] = parameter(value, name=name)

    def _p(self, key: str) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    def __call__(self, points: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        """points: (G, N, point_dim), cond: (G, cond_dim) → (G, N, out_dim)."""
        if points.ndim != 3 or points.shape[0] != self.n_groups or points.shape[2] != self.point_dim:
            raise ShapeError(
                f"{self.prefix}: expected points ({self.n_groups}, N, {self.point_dim}), got {points.shape}"
            )
        h = matmul(points, self._p("0.weight_points")) + self._p("0.bias")
        if self.cond_dim:
            if cond is None or cond.shape != (self.n_groups, self.cond_dim):
                got = None if cond is None else cond.shape
                raise ShapeError(f"{self.prefix}: expected conditioning ({self.n_groups}, {self.cond_dim}), got {got}")
            h = h + matmul(reshape(cond, (self.n_groups, 1, self.cond_dim)), self._p("0.weight_cond"))
        for i in range(1, self.n_layers):
            h = softplus(h)
            h = matmul(h, self._p(f"{i}.weight")) + self._p(f"{i}.bias")
        return h


@dataclass
class BoneOutputs:
    """Per-bone evaluation: unposed points (n_b, N, 3), SDF (n_b, N), color (n_b, N, 3) or None."""

    x_local: Tensor
    sdf: Tensor
    color: Optional[Tensor] = None


@dataclass
class FieldSample:
    """Blended field at N query points: s (N,), c (N, 3) or None, w (N, n_b)."""

    sdf: Tensor
    color: Optional[Tensor]
    weights: Tensor
    bones: Optional[BoneOutputs] = None


class ImplicitModel:
    """The articulated shape and appearance field of one skeleton."""

    def __init__(self, skeleton: Skeleton, config: Optional[ModelConfig] = None, seed: int = 0):
        self.skeleton = skeleton
        self.config = config or ModelConfig()
        self.n_bones = skeleton.n_bones
        self.latent_dim = self.config.latent_dim
        rng = np.random.default_rng(seed)

        point_dim = encoded_dim(self.config.encoding_freqs)
        view_dim = encoded_dim(self.config.view_freqs) if self.config.use_view_dir else 0
        pose_dim = self.pose_feature_dim
        self.sdf_net = BoneMLP("sdf", self.n_bones, point_dim, pose_dim + self.latent_dim,
                               self.config.sdf_hidden, 1, rng,
                               final_std=0.0, final_bias=-self.config.init_radius)
        self.color_net = BoneMLP("color", self.n_bones, point_dim + view_dim, pose_dim + 2 * self.latent_dim,
                                 self.config.color_hidden, 3, rng, final_std=1e-2)
        self.weight_net = BoneMLP("weight", 1, 4 * self.n_bones, 0,
                                  self.config.weight_hidden, self.n_bones, rng, final_std=0.0)

        self.params: Dict[str, Tensor] = {}
        for net in (self.sdf_net, self.color_net, self.weight_net):
            self.params.update(net.params)
        # logits get -sharpness * s_j on top of the MLP output
        self.params["weight.sharpness"] = parameter(np.array(self.config.init_sharpness),
                                                    name="weight.sharpness")
        self.params["density.alpha"] = parameter(np.array(_inverse_softplus(self.config.alpha)),
                                                 name="density.alpha")
        self.params["density.beta"] = parameter(np.array(_inverse_softplus(self.config.init_beta)),
                                                name="density.beta")

    # -- parameters -------------------------------------------------------------
    @property
    def pose_feature_dim(self) -> int:
        mode = self.config.pose_conditioning
        if mode == "local":
            return 12
        if mode == "full":
            return self.skeleton.pose_dim
        return 0

    @property
    def alpha(self) -> Tensor:
        return softplus(self.params["density.alpha"])

    @property
    def beta(self) -> Tensor:
        return softplus(self.params["density.beta"])

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, param in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"Checkpoint is missing parameter {name}")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(f"Parameter {name}: checkpoint shape {value.shape}, model shape {param.shape}")
            param.data = value.copy()

    def describe(self) -> Dict[str, Any]:
        return {
            "skeleton": self.skeleton.to_dict(),
            "model": self.config.model_dump(),
            "n_parameters": int(sum(p.size for p in self.params.values())),
        }

    # -- conditioning -------------------------------------------------------
    def _pose_features(self, pose: Tensor, transforms: BoneTransforms) -> Optional[Tensor]:
        mode = self.config.pose_conditioning
        if mode == "none":
            return None
        if mode == "full":
            flat = reshape(pose, (1, self.skeleton.pose_dim))
            return broadcast_to(flat, (self.n_bones, self.skeleton.pose_dim))
        if transforms.local_rotations is None:
            raise ValueError("local pose conditioning needs local rotations from forward_kinematics")
        rot = reshape(transforms.local_rotations, (self.n_bones, 9))
        return concat([rot, Tensor(self.skeleton.offsets)], axis=-1)

    def _conditioning(self, pose_features: Optional[Tensor], codes: Sequence[Tensor]) -> Tensor:
        parts = [] if pose_features is None else [pose_features]
        for code in codes:
            code = as_tensor(code)
            if code.shape != (self.latent_dim,):
                raise ShapeError(f"latent code must have shape ({self.latent_dim},), got {code.shape}")
            parts.append(broadcast_to(reshape(code, (1, self.latent_dim)), (self.n_bones, self.latent_dim)))
        return concat(parts, axis=-1)

    def _prepare(self, pose: Optional[PoseLike], transforms: Optional[BoneTransforms]):
        theta = as_pose(self.skeleton, pose)
        if transforms is None:
            transforms = forward_kinematics(self.skeleton, theta)
        return theta, transforms

    # -- evaluation -------------------------------------------------------------
    def eval_per_bone(self, x: ArrayLike, pose: Optional[PoseLike], shape_code: ArrayLike,
                      color_code: Optional[ArrayLike] = None,
                      transforms: Optional[BoneTransforms] = None,
                      view_dirs: Optional[ArrayLike] = None) -> BoneOutputs:
        """Evaluate every bone's networks at its own unposed copy of the query points.

        Args:
            x: (N, 3) world points
            pose: (n_j, 3) axis-angle pose, used when ``transforms`` is None
                and by the ``full`` conditioning mode
            shape_code: (D,) shape latent
            color_code: (D,) color latent; None skips the color networks
            transforms: precomputed forward kinematics
            view_dirs: (N, 3) unit ray directions in world frame

        Returns:
            BoneOutputs with s_j = MLP_j + ‖x_j‖
        """
        theta, transforms = self._prepare(pose, transforms)
        x_local = unpose(x, transforms)
        features = positional_encode(x_local, self.config.encoding_freqs)
        pose_features = self._pose_features(theta, transforms)

        raw = self.sdf_net(features, self._conditioning(pose_features, [shape_code]))
        sdf = reshape(raw, raw.shape[:2]) + norm(x_local, axis=-1)

        color = None
        if color_code is not None:
            color_in = features
            if self.config.use_view_dir:
                if view_dirs is None:
                    raise ValueError("color evaluation needs view directions when use_view_dir is on")
                dirs = as_tensor(view_dirs)
                if dirs.shape != (x_local.shape[1], 3):
                    raise ShapeError(f"view_dirs must have shape ({x_local.shape[1]}, 3), got {dirs.shape}")
                local_dirs = matmul(reshape(dirs, (1, dirs.shape[0], 3)), transforms.rotations)
                color_in = concat([features, positional_encode(local_dirs, self.config.view_freqs)], axis=-1)
            cond = self._conditioning(pose_features, [shape_code, color_code])
            color = sigmoid(self.color_net(color_in, cond))
        return BoneOutputs(x_local, sdf, color)

    def eval_weights(self, x_local: Tensor, sdf: Tensor) -> Tensor:
        """Softmax skinning weights (N, n_b) from unposed points (n_b, N, 3) and per-bone SDF (n_b, N)."""
        n = x_local.shape[1]
        per_bone = concat([swapaxes(x_local, 0, 1), reshape(swapaxes(sdf, 0, 1), (n, self.n_bones, 1))], axis=-1)
        logits = self.weight_net(reshape(per_bone, (1, n, 4 * self.n_bones)))
        logits = reshape(logits, (n, self.n_bones)) - mul(self.params["weight.sharpness"], swapaxes(sdf, 0, 1))
        return softmax(logits, axis=-1)

    def eval_field(self, x: ArrayLike, view_dirs: Optional[ArrayLike], pose: Optional[PoseLike],
                   shape_code: ArrayLike, color_code: Optional[ArrayLike] = None,
                   transforms: Optional[BoneTransforms] = None) -> FieldSample:
        """Blended s = Σ w_j s_j and c = Σ w_j c_j at N world points."""
        bones = self.eval_per_bone(x, pose, shape_code, color_code, transforms, view_dirs)
        weights = self.eval_weights(bones.x_local, bones.sdf)
        sdf = tsum(mul(weights, swapaxes(bones.sdf, 0, 1)), axis=-1)
        color = None
        if bones.color is not None:
            per_point = swapaxes(bones.color, 0, 1)
            color = tsum(mul(reshape(weights, weights.shape + (1,)), per_point), axis=1)
        return FieldSample(sdf, color, weights, bones)

    def eval_sdf(self, x: ArrayLike, pose: Optional[PoseLike], shape_code: ArrayLike,
                 transforms: Optional[BoneTransforms] = None) -> FieldSample:
        """Geometry-only evaluation; the color networks are not run."""
        return self.eval_field(x, None, pose, shape_code, None, transforms)

    def sdf_fn(self, pose: Optional[PoseLike], shape_code: ArrayLike,
               transforms: Optional[BoneTransforms] = None) -> Callable[[Tensor], Tensor]:
        """Closure x → s for a fixed pose and code (kinematics evaluated once)."""
        theta, transforms = self._prepare(pose, transforms)

        def fn(x: Tensor) -> Tensor:
            return self.eval_sdf(x, theta, shape_code, transforms).sdf

        return fn
