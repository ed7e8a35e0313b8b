"""
Mesh Service for ArtiField
Handles the inference-side workflows on trained checkpoints: marching-cubes
mesh extraction, image rendering (color, normals, weight visualizations,
latent swapping and mixing) and evaluation against oracle or reference data.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ..config import RenderConfig, RunConfig, apply_overrides, load_run_config
from ..core.capsules import CapsuleRig, oracle_render, oracle_sdf, rig_bounds
from ..core.implicit_model import LatentCode
from ..core.kinematics import Skeleton, forward_kinematics
from ..core.meshing import TriMesh, extract_from_function, extract_mesh
from ..core.metrics import EvalResult, metric_psnr, metric_v2v_v2s
from ..core.rendering import RENDER_MODES, Camera, render_image
from .fitting_service import FitReport
from .storage_service import Dataset, read_obj, read_png, read_pose, write_json, write_obj, write_png, write_raw
from .training_service import ModelBundle, load_bundle, reference_rig

logger = logging.getLogger(__name__)


@dataclass
class CodeRequest:
    """How to pick the latent code and pose for an extraction or render."""

    subject: Optional[str] = None
    shape_subject: Optional[str] = None
    color_subject: Optional[str] = None
    mix: Optional[float] = None
    mix_subject: Optional[str] = None
    report: Optional[str] = None
    pose: Optional[str] = None


def resolve_code(bundle: ModelBundle, request: CodeRequest) -> Tuple[LatentCode, Optional[np.ndarray]]:
    """Latent code and pose for a request.

    Precedence: a fit report supplies both; ``mix`` blends ``subject`` into
    ``mix_subject``; shape/color subjects swap appearance; otherwise the
    subject's own code or the table mean. An explicit pose file wins over
    the report's pose.
    """
    table = bundle.latents
    pose = None
    if request.report:
        report = FitReport.load(request.report)
        code = report.code(table.mean_code().color.data)
        pose = report.pose
    elif request.mix is not None:
        if not request.subject or not request.mix_subject:
            raise ValueError("Latent mixing needs both a subject and a mix subject")
        if not 0.0 <= request.mix <= 1.0:
            raise ValueError(f"Mix factor must lie in [0, 1], got {request.mix}")
        code = table.interpolate(request.subject, request.mix_subject, request.mix)
    elif request.shape_subject or request.color_subject:
        shape = request.shape_subject or request.subject or request.color_subject
        color = request.color_subject or request.subject or request.shape_subject
        code = table.swap(shape, color)
    else:
        code = bundle.code_for(request.subject).detach()
    if request.pose:
        pose, _ = read_pose(request.pose)
    return code, pose


def oracle_mesh(rig: CapsuleRig, pose: Optional[np.ndarray], resolution: int = 128,
                padding: float = 0.01) -> TriMesh:
    """Marching-cubes triangulation of the capsule oracle at a pose."""
    transforms = forward_kinematics(rig.skeleton, pose).detach()
    bounds = rig_bounds(rig, transforms, padding)
    return extract_from_function(lambda p: oracle_sdf(p, None, rig, transforms).sdf, bounds, resolution)


class MeshService:
    """Service for meshing, rendering and evaluating trained models"""

    def __init__(self):
        self._cache: Dict[str, Tuple[float, ModelBundle]] = {}

    def load(self, checkpoint: str) -> ModelBundle:
        """Load a checkpoint, reusing the parsed bundle while the file is unchanged."""
        path = Path(checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
        mtime = path.stat().st_mtime
        cached = self._cache.get(str(path))
        if cached is None or cached[0] != mtime:
            self._cache[str(path)] = (mtime, load_bundle(str(path)))
            logger.info(f"Loaded checkpoint {path}")
        return self._cache[str(path)][1]

    def render_config(self, checkpoint: str, config_path: Optional[str] = None,
                      overrides: Sequence[str] = ()) -> RenderConfig:
        """Render settings: the checkpoint's stored configuration, or the file
        at ``config_path``, with dotted overrides applied on top."""
        if config_path:
            return load_run_config(config_path, overrides).render
        data = self.load(checkpoint).config.model_dump()
        return RunConfig.model_validate(apply_overrides(data, overrides)).render

    def extract(self, checkpoint: str, out_path: str, request: Optional[CodeRequest] = None,
                resolution: int = 128, skeleton: Optional[Skeleton] = None,
                config: Optional[RenderConfig] = None) -> Dict[str, Any]:
        """Extract the zero level set to an OBJ file with vertex colors.

        ``config`` supplies the box padding and chunk size (default: the
        checkpoint's render settings).
        """
        bundle = self.load(checkpoint)
        config = config or bundle.config.render
        code, pose = resolve_code(bundle, request or CodeRequest())
        start = time.perf_counter()
        mesh = extract_mesh(bundle.model, pose, code, resolution, config.bbox_padding,
                            chunk=config.chunk * 16, skeleton=skeleton)
        write_obj(out_path, mesh)
        summary = {
            "mesh": out_path,
            "vertices": int(len(mesh.vertices)),
            "faces": int(len(mesh.faces)),
            "area_m2": mesh.area(),
            "empty": mesh.is_empty,
            "runtime_s": round(time.perf_counter() - start, 3),
        }
        if mesh.is_empty:
            logger.warning(f"Extracted mesh is empty: {out_path}")
        logger.info(f"Mesh written: {summary}")
        return summary

    def render(self, checkpoint: str, camera: Camera, out_prefix: str, request: Optional[CodeRequest] = None,
               mode: str = "color", config: Optional[RenderConfig] = None,
               skeleton: Optional[Skeleton] = None, seed: Optional[int] = None) -> Dict[str, Any]:
        """Render one view to ``<prefix>.png`` plus float dumps ``<prefix>_depth.npy`` and ``<prefix>_opacity.npy``.

        Unseen cameras use the mean per-camera calibration; a camera seen in
        training uses its own. Sample depths are jittered only when the render
        settings enable perturbation and a ``seed`` is given.
        """
        if mode not in RENDER_MODES:
            raise ValueError(f"Unknown render mode {mode!r}; expected one of {RENDER_MODES}")
        bundle = self.load(checkpoint)
        code, pose = resolve_code(bundle, request or CodeRequest())
        if camera.name in bundle.calibration.cameras:
            gain, bias = (t.data for t in bundle.calibration.get(camera.name))
        else:
            gain, bias = bundle.calibration.mean()
        start = time.perf_counter()
        rng = np.random.default_rng(seed) if seed is not None else None
        images = render_image(bundle.model, camera, pose, code, config or bundle.config.render, mode,
                              calibration=(gain, bias), skeleton=skeleton, rng=rng)
        prefix = Path(out_prefix)
        write_png(prefix.with_suffix(".png"), images["rgb"])
        write_raw(prefix.parent / f"{prefix.name}_depth.npy", images["depth"])
        write_raw(prefix.parent / f"{prefix.name}_opacity.npy", images["opacity"])
        summary = {"image": str(prefix.with_suffix(".png")), "mode": mode, "camera": camera.name,
                   "coverage": float((images["opacity"] > 0.5).mean()),
                   "runtime_s": round(time.perf_counter() - start, 3)}
        logger.info(f"Render written: {summary}")
        return summary

    def evaluate_meshes(self, mesh_path: str, reference: TriMesh) -> EvalResult:
        start = time.perf_counter()
        result = metric_v2v_v2s(read_obj(mesh_path), reference)
        result.runtime_s = round(time.perf_counter() - start, 3)
        return result

    def evaluate(self, mesh_path: Optional[str] = None, reference_mesh: Optional[str] = None,
                 dataset: Optional[Dataset] = None, frame: Optional[str] = None,
                 image: Optional[str] = None, reference_image: Optional[str] = None,
                 mask: Optional[str] = None, resolution: int = 128,
                 out_path: Optional[str] = None) -> EvalResult:
        """Mesh distances against an OBJ or the dataset oracle, and/or masked PSNR between two images.

        Args:
            mesh_path: reconstruction (OBJ)
            reference_mesh: reference OBJ; when absent, ``dataset`` + ``frame``
                select the capsule oracle of that frame
            image, reference_image, mask: PNG paths for the PSNR score
        """
        start = time.perf_counter()
        result = EvalResult()
        if mesh_path:
            if reference_mesh:
                reference = read_obj(reference_mesh)
            elif dataset is not None and frame:
                record = next((f for f in dataset.frames if f.name == frame), None)
                if record is None:
                    raise FileNotFoundError(f"Frame {frame} is not in dataset {dataset.root}")
                reference = oracle_mesh(reference_rig(dataset, record.subject), dataset.pose(record), resolution)
            else:
                raise ValueError("Mesh evaluation needs a reference mesh or a dataset frame")
            result = self.evaluate_meshes(mesh_path, reference)
        if image or reference_image:
            if not (image and reference_image):
                raise ValueError("PSNR needs both an image and a reference image")
            mask_array = read_png(mask) > 0.5 if mask else None
            if mask_array is not None and mask_array.ndim == 3:
                mask_array = mask_array[..., 0]
            result.psnr_db = metric_psnr(read_png(image), read_png(reference_image), mask_array)
        if not mesh_path and not image:
            raise ValueError("Nothing to evaluate: give a mesh and/or an image pair")
        result.runtime_s = round(time.perf_counter() - start, 3)
        if out_path:
            write_json(out_path, result.to_dict())
        logger.info(f"Evaluation: {result.to_dict()}")
        return result

    def render_oracle(self, dataset: Dataset, frame: str, camera: Camera, out_prefix: str) -> Dict[str, Any]:
        """Reference render of a dataset frame from any camera (novel-view ground truth)."""
        record = next((f for f in dataset.frames if f.name == frame), None)
        if record is None:
            raise FileNotFoundError(f"Frame {frame} is not in dataset {dataset.root}")
        rig = reference_rig(dataset, record.subject)
        light = dataset.manifest.get("config", {}).get("light_dir", (0.3, -0.4, 0.85))
        images = oracle_render(camera, dataset.pose(record), rig, light)
        prefix = Path(out_prefix)
        write_png(prefix.with_suffix(".png"), images["rgb"])
        write_png(prefix.parent / f"{prefix.name}_mask.png", images["mask"])
        return {"image": str(prefix.with_suffix(".png")), "mask": str(prefix.parent / f"{prefix.name}_mask.png")}
