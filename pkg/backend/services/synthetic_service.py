"""
Synthetic Service for ArtiField
Generates capsule-rig datasets: subjects, posed scans with normals and
reference skinning weights, and multi-view images with masks, depth and 2D
joint detections, all described by a manifest.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ..config import SyntheticConfig, get_settings
from ..core.capsules import CapsuleRig, oracle_render, sample_surface
from ..core.kinematics import Skeleton, forward_kinematics, random_pose
from ..core.rendering import Camera, camera_depths, project_points, ring_cameras
from .storage_service import (
    write_cloud, write_joints, write_json, write_png, write_pose, write_raw,
)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def subject_name(index: int) -> str:
    return f"s{index:02d}"


def frame_name(subject: str, pose_index: int) -> str:
    return f"{subject}_p{pose_index:03d}"


def load_skeleton(name_or_path: str) -> Skeleton:
    return Skeleton.load(name_or_path)


def make_subjects(config: SyntheticConfig, seed: int, skeleton: Optional[Skeleton] = None) -> List[CapsuleRig]:
    """Seeded subject variations of the default rig (radii, bone lengths, colors)."""
    skeleton = skeleton or load_skeleton(config.skeleton)
    base = CapsuleRig.default(skeleton, config.palm_radius, config.finger_radius,
                              config.smooth_radius, config.weight_sharpness)
    return [
        base.perturbed(np.random.default_rng([seed, 1, s]), config.radius_jitter, config.length_jitter,
                       config.color_jitter, name=subject_name(s))
        for s in range(config.n_subjects)
    ]


def make_cameras(config: SyntheticConfig, rig: CapsuleRig) -> List[Camera]:
    """Ring of cameras around the rest-pose center of the rig."""
    target = rig.skeleton.rest_positions().mean(axis=0)
    return ring_cameras(config.n_cameras, config.camera_distance, config.camera_height, target,
                        config.image_size, config.image_size, config.fov_deg)


def detections_for(rig: CapsuleRig, pose: np.ndarray, camera: Camera) -> np.ndarray:
    """Ground-truth 2D joints as detections; joints behind the camera get confidence 0."""
    joints = forward_kinematics(rig.skeleton, pose).translations.data
    out = np.zeros((len(joints), 3))
    visible = camera_depths(joints, camera) > 1e-6
    if np.any(visible):
        out[visible, :2] = project_points(joints[visible], camera)
        out[visible, 2] = 1.0
    return out


class SyntheticService:
    """Service for emitting synthetic capsule-rig datasets"""

    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or get_settings().workers

    def emit_dataset(self, out_dir: str, config: Optional[SyntheticConfig] = None, seed: int = 0,
                     progress: bool = True) -> Dict[str, Any]:
        """Write a complete dataset to ``out_dir`` and return its manifest.

        Args:
            out_dir: target directory (created if missing)
            config: dataset sizes, rig parameters and camera ring
            seed: controls subjects, poses and scan sampling; frames use
                derived per-frame seeds so the output does not depend on
                the worker count

        Returns:
            The manifest dictionary (also written as manifest.json)
        """
        config = config or SyntheticConfig()
        root = Path(out_dir)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"Cannot create dataset directory {root}: {e}") from e

        skeleton = load_skeleton(config.skeleton)
        subjects = make_subjects(config, seed, skeleton)
        cameras = make_cameras(config, subjects[0])

        camera_files = {}
        for cam in cameras:
            rel = f"cameras/{cam.name}.json"
            (root / "cameras").mkdir(exist_ok=True)
            cam.save(root / rel)
            camera_files[cam.name] = rel

        subject_entries = {}
        for rig in subjects:
            rel = f"rigs/{rig.name}.json"
            write_json(root / rel, rig.to_dict())
            subject_entries[rig.name] = {"rig": rel, "skeleton": rig.skeleton.to_dict()}

        jobs: List[Tuple[int, CapsuleRig, int]] = [
            (s, rig, p) for s, rig in enumerate(subjects) for p in range(config.n_poses)
        ]

        def run(job: Tuple[int, CapsuleRig, int]) -> Dict[str, Any]:
            s, rig, p = job
            return self._emit_frame(root, rig, p, cameras, config, np.random.default_rng([seed, 2, s, p]))

        logger.info(f"Emitting {len(jobs)} frames x {len(cameras)} views to {root} with {self.workers} worker(s)")
        bar = tqdm(total=len(jobs), desc="gen-synthetic", disable=not progress)
        frames: List[Dict[str, Any]] = []
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                for record in pool.map(run, jobs):
                    frames.append(record)
                    bar.update(1)
        else:
            for job in jobs:
                frames.append(run(job))
                bar.update(1)
        bar.close()

        manifest = {
            "version": MANIFEST_VERSION,
            "seed": seed,
            "config": config.model_dump(),
            "skeleton": skeleton.to_dict(),
            "subjects": subject_entries,
            "cameras": camera_files,
            "frames": frames,
            "frame_count": len(frames) * len(cameras),
            "scan_count": len(frames),
        }
        write_json(root / "manifest.json", manifest)
        logger.info(f"Dataset written: {manifest['frame_count']} views, {manifest['scan_count']} scans")
        return manifest

    def _emit_frame(self, root: Path, rig: CapsuleRig, pose_index: int, cameras: List[Camera],
                    config: SyntheticConfig, rng: np.random.Generator) -> Dict[str, Any]:
        name = frame_name(rig.name, pose_index)
        pose = random_pose(rig.skeleton, rng, max_flex=config.max_flex)
        pose_rel = f"poses/{name}.json"
        write_pose(root / pose_rel, pose, rig.name)

        samples = sample_surface(rig, pose, config.scan_points, rng)
        scan_rel = f"scans/{name}.ply"
        write_cloud(root / scan_rel, samples.points, samples.normals, samples.weights)

        views = []
        for cam in cameras:
            view_name = f"{name}_{cam.name}"
            rendered = oracle_render(cam, pose, rig, config.light_dir)
            if not rendered["mask"].any():
                logger.warning(f"Camera {cam.name} does not see {name}")
            record = {
                "camera": cam.name,
                "image": f"images/{view_name}.png",
                "mask": f"masks/{view_name}.png",
                "depth": f"depth/{view_name}.npy",
                "joints": f"joints/{view_name}.txt",
            }
            write_png(root / record["image"], rendered["rgb"])
            write_png(root / record["mask"], rendered["mask"])
            write_raw(root / record["depth"], rendered["depth"])
            write_joints(root / record["joints"], detections_for(rig, pose, cam))
            views.append(record)
        return {"subject": rig.name, "pose_index": pose_index, "pose": pose_rel, "scan": scan_rel, "views": views}
