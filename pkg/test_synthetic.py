#!/usr/bin/env python3
"""
Tests for synthetic dataset emission
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from backend.config import load_run_config
from backend.core.capsules import CapsuleRig, oracle_sdf
from backend.core.rendering import Camera
from backend.services.storage_service import load_dataset, read_json
from backend.services.synthetic_service import SyntheticService, detections_for, make_subjects

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "smoke.json")


def smoke_synthetic():
    return load_run_config(SMOKE_CONFIG).synthetic


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_manifest_counts():
    """Views = subjects × poses × cameras; one scan per subject and pose"""
    config = smoke_synthetic()
    with tempfile.TemporaryDirectory() as tmp:
        manifest = SyntheticService(workers=1).emit_dataset(tmp, config, seed=0, progress=False)
        expected = config.n_subjects * config.n_poses * config.n_cameras
        assert manifest["frame_count"] == expected
        assert manifest["scan_count"] == config.n_subjects * config.n_poses
        assert read_json(Path(tmp) / "manifest.json") == manifest

        dataset = load_dataset(tmp)
        assert dataset.view_count == expected
        assert dataset.subjects == ["s00", "s01"]
        assert sorted(dataset.cameras) == ["cam00", "cam01"]
        view = dataset.frames[0].views[0]
        assert dataset.image(view).shape == (config.image_size, config.image_size, 3)
        assert dataset.mask(view).dtype == bool
        assert dataset.joints(view).shape == (dataset.skeleton.n_joints, 3)


def test_emission_is_deterministic():
    """The same seed gives byte-identical datasets whatever the worker count"""
    config = smoke_synthetic()
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b, \
            tempfile.TemporaryDirectory() as c:
        SyntheticService(workers=1).emit_dataset(a, config, seed=3, progress=False)
        SyntheticService(workers=1).emit_dataset(b, config, seed=3, progress=False)
        SyntheticService(workers=2).emit_dataset(c, config, seed=3, progress=False)
        first = tree_bytes(a)
        assert first == tree_bytes(b)
        assert first == tree_bytes(c)


def test_scans_lie_on_the_oracle_surface():
    config = smoke_synthetic()
    with tempfile.TemporaryDirectory() as tmp:
        SyntheticService(workers=1).emit_dataset(tmp, config, seed=1, progress=False)
        dataset = load_dataset(tmp)
        for frame in dataset.scan_frames:
            rig = CapsuleRig.from_dict(read_json(Path(tmp) / "rigs" / f"{frame.subject}.json"))
            cloud = dataset.scan(frame)
            assert len(cloud) == config.scan_points
            assert np.abs(oracle_sdf(cloud.points, dataset.pose(frame), rig).sdf).max() < 1e-5
            assert np.allclose(cloud.weights.sum(axis=1), 1.0)
            assert np.allclose(np.linalg.norm(cloud.normals, axis=-1), 1.0)


def test_subjects_differ():
    config = smoke_synthetic()
    a, b = make_subjects(config, seed=0)
    assert a.name == "s00" and b.name == "s01"
    assert not np.array_equal(a.radii, b.radii)
    again = make_subjects(config, seed=0)
    assert np.array_equal(again[1].radii, b.radii)


def test_detections_follow_the_camera():
    """Detections are the projected joints; joints behind the camera get zero confidence"""
    config = smoke_synthetic()
    rig = make_subjects(config, seed=0)[0]
    front = Camera.look_at([0.0, 0.08, 0.4], [0.0, 0.08, 0.0], width=32, height=32)
    det = detections_for(rig, None, front)
    assert np.all(det[:, 2] == 1.0)
    assert np.allclose(det[0, :2], [16.0, 16.0 + 0.08 / np.tan(np.radians(20.0)) / 0.4 * 16.0])
    away = Camera.look_at([0.0, 0.08, 0.4], [0.0, 0.08, 1.0], width=32, height=32)
    assert np.all(detections_for(rig, None, away)[:, 2] == 0.0)


def main():
    print("Testing synthetic data")
    print("=" * 40)

    tests = [
        ("Manifest counts", test_manifest_counts),
        ("Deterministic emission", test_emission_is_deterministic),
        ("Scans on the surface", test_scans_lie_on_the_oracle_surface),
        ("Subject variation", test_subjects_differ),
        ("Joint detections", test_detections_follow_the_camera),
    ]

    results = []
    for name, test_func in tests:
        print(f"\n{name}:")
        try:
            test_func()
            result = True
        except Exception as e:
            print(f"❌ {type(e).__name__}: {e}")
            result = False
        results.append((name, result))

    print("\n" + "=" * 40)
    print("Results:")
    for name, result in results:
        status = "PASS" if result else "FAIL"
        print(f"{name}: {status}")
    return all(result for _, result in results)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
