"""
Evaluation metrics for ArtiField
V2V / V2S mesh distances (both directions, millimeters), symmetric chamfer
on point sets and masked PSNR.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np
import trimesh
import trimesh.proximity
from scipy.spatial import cKDTree

from .meshing import TriMesh

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
MM = 1000.0


@dataclass
class EvalResult:
    """Distances in millimeters; ``a_to_b`` averages over the vertices of A."""

    v2v_a_to_b_mm: float = 0.0
    v2v_b_to_a_mm: float = 0.0
    v2s_a_to_b_mm: float = 0.0
    v2s_b_to_a_mm: float = 0.0
    psnr_db: Optional[float] = None
    runtime_s: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def _require_nonempty(mesh: TriMesh, label: str) -> None:
    if len(mesh.vertices) == 0:
        raise ValueError(f"Mesh {label} is empty")
    if not np.all(np.isfinite(mesh.vertices)):
        raise ValueError(f"Mesh {label} has non-finite vertices")


def nearest_vertex_distance(points: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest reference point (cKDTree)."""
    distances, _ = cKDTree(reference).query(points, k=1)
    return distances


def nearest_surface_distance(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Distance from each point to the closest point on the mesh triangles."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mesh.is_empty:
        raise ValueError(f"Surface distance needs triangles; the mesh has {len(mesh.vertices)} vertices and no faces")
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{int((~np.isfinite(points)).any(axis=-1).sum())} query point(s) are not finite")
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    _, distances, _ = trimesh.proximity.closest_point(tm, points)
    if not np.all(np.isfinite(distances)):
        raise ValueError(f"Surface distance query returned {int((~np.isfinite(distances)).sum())} non-finite value(s)")
    return distances


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to ``p`` (3,) on each triangle (T, 3) by Voronoi-region case analysis."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ti,ti->t", ab, ap)
    d2 = np.einsum("ti,ti->t", ac, ap)
    bp = p - b
    d3 = np.einsum("ti,ti->t", ab, bp)
    d4 = np.einsum("ti,ti->t", ac, bp)
    cp = p - c
    d5 = np.einsum("ti,ti->t", ab, cp)
    d6 = np.einsum("ti,ti->t", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    result = a + v_face[:, None] * ab + w_face[:, None] * ac

    cases = [
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d1 <= 0) & (d2 <= 0), a),
    ]
    # later entries take precedence
    for mask, value in cases:
        result = np.where(mask[:, None], value, result)
    return result


def brute_force_surface_distance(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exhaustive point-to-triangle distance; intended for small meshes."""
    tri = mesh.vertices[mesh.faces]
    out = np.zeros(len(points))
    for i, p in enumerate(points):
        closest = closest_point_on_triangles(p, tri[:, 0], tri[:, 1], tri[:, 2])
        out[i] = np.min(np.linalg.norm(closest - p, axis=-1))
    return out


def metric_v2v_v2s(mesh_a: TriMesh, mesh_b: TriMesh) -> EvalResult:
    """V2V (nearest vertex) and V2S (nearest triangle) in both directions, in mm.

    Both meshes need finite vertices and at least one face.
    """
    _require_nonempty(mesh_a, "A")
    _require_nonempty(mesh_b, "B")
    return EvalResult(
        v2v_a_to_b_mm=float(nearest_vertex_distance(mesh_a.vertices, mesh_b.vertices).mean() * MM),
        v2v_b_to_a_mm=float(nearest_vertex_distance(mesh_b.vertices, mesh_a.vertices).mean() * MM),
        v2s_a_to_b_mm=float(nearest_surface_distance(mesh_a.vertices, mesh_b).mean() * MM),
        v2s_b_to_a_mm=float(nearest_surface_distance(mesh_b.vertices, mesh_a).mean() * MM),
    )


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric chamfer: average of the two mean nearest-neighbor distances (meters)."""
    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    points_b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(points_a) == 0 or len(points_b) == 0:
        raise ValueError("chamfer_distance needs two non-empty point sets")
    a_to_b = nearest_vertex_distance(points_a, points_b).mean()
    b_to_a = nearest_vertex_distance(points_b, points_a).mean()
    return float(0.5 * (a_to_b + b_to_a))


def metric_psnr(image_a: np.ndarray, image_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10·log10(1 / MSE) over masked pixels of [0, 1] images; identical images give the 99 dB cap."""
    image_a = np.asarray(image_a, dtype=np.float64)
    image_b = np.asarray(image_b, dtype=np.float64)
    if image_a.shape != image_b.shape:
        raise ValueError(f"Image shapes differ: {image_a.shape} vs {image_b.shape}")
    diff = (image_a - image_b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != image_a.shape[:2]:
            raise ValueError(f"Mask shape {mask.shape} does not match image {image_a.shape[:2]}")
        if not mask.any():
            raise ValueError("PSNR mask selects no pixels")
        diff = diff[mask]
    mse = float(diff.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))
