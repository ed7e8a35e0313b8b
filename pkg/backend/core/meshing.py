"""
Mesh extraction for ArtiField
Dense grid evaluation of a field and marching cubes (PyMCubes) on its zero
level set, with per-vertex colors and skinning weights from the model.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import mcubes
import numpy as np

from .implicit_model import ImplicitModel, LatentCode
from .kinematics import PoseLike, Skeleton, as_pose, forward_kinematics, skeleton_bounds
from .tensor import grad, no_grad, enable_grad, parameter

logger = logging.getLogger(__name__)

MIN_RESOLUTION = 16
DEGENERATE_AREA = 1e-14


@dataclass
class TriMesh:
    """Triangle mesh in meters with optional per-vertex colors (V, 3) and weights (V, n_b)."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError(f"Face indices out of range for {len(self.vertices)} vertices")
        for label, attr in (("colors", self.colors), ("weights", self.weights)):
            if attr is not None and len(attr) != len(self.vertices):
                raise ValueError(f"Mesh {label} has {len(attr)} rows for {len(self.vertices)} vertices")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0)
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def euler_characteristic(self) -> int:
        if self.is_empty:
            return 0
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_vertices = len(np.unique(self.faces))
        return n_vertices - n_edges + len(self.faces)

    def cleanup(self) -> "TriMesh":
        """Drop degenerate faces and unreferenced vertices."""
        faces = self.faces[self.face_areas() > DEGENERATE_AREA]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        pick = lambda a: None if a is None else a[used]
        return TriMesh(self.vertices[used], remap[faces], pick(self.colors), pick(self.weights))


def grid_axes(bounds: np.ndarray, resolution: int):
    return [np.linspace(bounds[0, k], bounds[1, k], resolution) for k in range(3)]


def evaluate_grid(fn: Callable[[np.ndarray], np.ndarray], bounds: np.ndarray, resolution: int,
                  chunk: int = 65536) -> np.ndarray:
    """Field values on a resolution³ lattice spanning ``bounds`` (2, 3), indexed [x, y, z]."""
    xs, ys, zs = grid_axes(bounds, resolution)
    values = np.zeros((resolution, resolution, resolution))
    # one x-slab at a time keeps memory flat
    slab = max(1, chunk // (resolution * resolution))
    for start in range(0, resolution, slab):
        gx, gy, gz = np.meshgrid(xs[start:start + slab], ys, zs, indexing="ij")
        points = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=-1)
        values[start:start + slab] = np.asarray(fn(points)).reshape(gx.shape)
    return values


def extract_level_set(values: np.ndarray, bounds: np.ndarray, level: float = 0.0) -> TriMesh:
    """Marching cubes on a signed field (negative inside); vertices in world units."""
    resolution = values.shape[0]
    if values.min() > level or values.max() < level:
        logger.warning("Level set is empty on the sampled grid; returning an empty mesh")
        return TriMesh.empty()
    vertices, triangles = mcubes.marching_cubes(-values, -level)
    vertices = vertices / (resolution - 1.0) * (bounds[1] - bounds[0])[None, :] + bounds[0][None, :]
    return TriMesh(vertices, triangles.astype(np.int64)).cleanup()


def extract_from_function(fn: Callable[[np.ndarray], np.ndarray], bounds: np.ndarray, resolution: int,
                          level: float = 0.0) -> TriMesh:
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"Marching-cubes resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    return extract_level_set(evaluate_grid(fn, bounds, resolution), bounds, level)


def extract_mesh(model: ImplicitModel, pose: Optional[PoseLike], code: LatentCode, resolution: int = 128,
                 padding: float = 0.05, with_attributes: bool = True, chunk: int = 32768,
                 skeleton: Optional[Skeleton] = None) -> TriMesh:
    """Triangulate the model's zero level set inside the padded skeleton box.

    Vertex colors are evaluated looking straight at the surface (view
    direction = −normal); weights come from the weight network.
    """
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"Marching-cubes resolution must be at least {MIN_RESOLUTION}, got {resolution}")
    theta = as_pose(model.skeleton, pose).detach()
    transforms = forward_kinematics(skeleton or model.skeleton, theta).detach()
    bounds = skeleton_bounds(transforms, (skeleton or model.skeleton).bone_segments(), padding)
    shape_code = code.shape.detach()

    def field(points: np.ndarray) -> np.ndarray:
        with no_grad():
            return model.eval_sdf(points, theta, shape_code, transforms).sdf.data

    mesh = extract_level_set(evaluate_grid(field, bounds, resolution, chunk), bounds)
    if mesh.is_empty or not with_attributes:
        return mesh

    colors = np.zeros((len(mesh.vertices), 3))
    weights = np.zeros((len(mesh.vertices), model.n_bones))
    for start in range(0, len(mesh.vertices), chunk):
        verts = mesh.vertices[start:start + chunk]
        with enable_grad():
            x = parameter(verts)
            sample = model.eval_sdf(x, theta, shape_code, transforms)
            (normal,) = grad([sample.sdf], [x])
        unit = normal.data / np.maximum(np.linalg.norm(normal.data, axis=-1, keepdims=True), 1e-12)
        with no_grad():
            full = model.eval_field(verts, -unit, theta, shape_code, code.color.detach(), transforms)
        colors[start:start + len(verts)] = full.color.data
        weights[start:start + len(verts)] = full.weights.data
    mesh.colors = colors
    mesh.weights = weights
    return mesh
