#!/usr/bin/env python3
"""
Tests for the on-disk formats handled by the storage service
"""

import asyncio
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from backend.core.errors import ParseError
from backend.core.meshing import TriMesh
from backend.services.storage_service import (
    StorageService, load_checkpoint, read_cloud, read_joints, read_json, read_obj, read_ply, read_png, read_pose,
    read_raw, save_checkpoint, write_cloud, write_joints, write_obj, write_ply, write_png, write_pose, write_raw,
)

RNG = np.random.default_rng(31)


def raises(exc, fn):
    try:
        fn()
    except exc:
        return True
    return False


def parse_error(fn):
    try:
        fn()
    except ParseError as e:
        return e
    raise AssertionError("expected a ParseError")


def sample_tensors():
    return {
        "sdf.w0": RNG.normal(size=(10, 5, 8)),
        "density.beta": np.array(-5.5),
        "latent.s00.shape": RNG.normal(size=4),
    }


def test_checkpoint_round_trip():
    """Parameters come back bit-identical and re-saving gives the same bytes"""
    tensors = sample_tensors()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.afck"
        save_checkpoint(path, tensors, {"step": 7, "config": {"latent_dim": 4}})
        header, loaded = load_checkpoint(path)
        assert header == {"step": 7, "config": {"latent_dim": 4}}
        assert set(loaded) == set(tensors)
        for name, value in tensors.items():
            assert loaded[name].shape == np.shape(value)
            assert np.array_equal(loaded[name], value)
        again = Path(tmp) / "again.afck"
        save_checkpoint(again, loaded, header)
        assert path.read_bytes() == again.read_bytes()


def test_checkpoint_corruption():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.afck"
        save_checkpoint(path, sample_tensors())
        data = path.read_bytes()

        path.write_bytes(data[:-5])
        err = parse_error(lambda: load_checkpoint(path))
        assert err.offset is not None and err.offset < len(data)
        assert "byte offset" in str(err)

        path.write_bytes(b"NOTMAGIC" + data[8:])
        assert parse_error(lambda: load_checkpoint(path)).offset == 0

        path.write_bytes(data + b"\x00")
        assert parse_error(lambda: load_checkpoint(path)).offset == len(data)
    assert raises(FileNotFoundError, lambda: load_checkpoint("/nonexistent/model.afck"))


def test_obj_round_trip():
    vertices = RNG.uniform(-0.1, 0.1, size=(6, 3))
    faces = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 0]])
    colors = RNG.uniform(size=(6, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "mesh.obj"
        write_obj(path, TriMesh(vertices, faces, colors))
        mesh = read_obj(path)
        assert np.abs(mesh.vertices - vertices).max() < 1e-6
        assert np.array_equal(mesh.faces, faces)
        assert np.abs(mesh.colors - colors).max() < 1e-5

        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")
        quad = read_obj(path)
        assert quad.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

        path.write_text("v 0 0 0\nv 1 oops 0\n")
        assert parse_error(lambda: read_obj(path)).line == 2


def test_ply_binary_and_ascii():
    points = RNG.normal(size=(12, 3))
    normals = points / np.linalg.norm(points, axis=-1, keepdims=True)
    weights = RNG.dirichlet(np.ones(4), size=12)
    with tempfile.TemporaryDirectory() as tmp:
        for binary in (True, False):
            path = Path(tmp) / f"cloud_{binary}.ply"
            write_cloud(path, points, normals, weights, binary=binary)
            cloud = read_cloud(path)
            assert len(cloud) == 12
            assert np.array_equal(cloud.points, points)
            assert np.array_equal(cloud.normals, normals)
            assert np.array_equal(cloud.weights, weights)

        bare = Path(tmp) / "bare.ply"
        write_ply(bare, {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]})
        cloud = read_cloud(bare)
        assert cloud.normals is None and cloud.weights is None
        assert raises(ValueError, lambda: write_ply(bare, {"x": np.zeros(3), "y": np.zeros(4)}))


def test_truncated_ply():
    """Truncation is reported with the byte offset where the data ran out"""
    points = RNG.normal(size=(8, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "cloud.ply"
        write_cloud(path, points)
        cut = path.read_bytes()[:-10]
        path.write_bytes(cut)
        err = parse_error(lambda: read_ply(path))
        assert err.offset == len(cut)
        assert f"byte offset {len(cut)}" in str(err)

        write_cloud(path, points, binary=False)
        lines = path.read_bytes().splitlines(keepends=True)
        path.write_bytes(b"".join(lines[:-2]))
        assert parse_error(lambda: read_ply(path)).line is not None

        path.write_bytes(b"not a ply file")
        assert parse_error(lambda: read_ply(path)).offset == 0


def test_images():
    image = RNG.uniform(size=(5, 7, 3))
    mask = RNG.uniform(size=(5, 7)) > 0.5
    with tempfile.TemporaryDirectory() as tmp:
        write_png(os.path.join(tmp, "rgb.png"), image)
        back = read_png(os.path.join(tmp, "rgb.png"))
        assert back.shape == (5, 7, 3)
        assert np.abs(back - image).max() <= 0.5 / 255.0 + 1e-12
        write_png(os.path.join(tmp, "mask.png"), mask)
        assert np.array_equal(read_png(os.path.join(tmp, "mask.png")) > 0.5, mask)
        write_raw(os.path.join(tmp, "rgb.npy"), image)
        raw = read_raw(os.path.join(tmp, "rgb.npy"))
        assert raw.dtype == np.float32
        assert np.array_equal(raw, image.astype(np.float32))


def test_pose_and_joint_files():
    pose = RNG.normal(size=(10, 3))
    joints = np.column_stack([RNG.uniform(0, 64, size=(10, 2)), np.ones(10)])
    with tempfile.TemporaryDirectory() as tmp:
        pose_path = os.path.join(tmp, "pose.json")
        write_pose(pose_path, pose, subject="s00")
        loaded, subject = read_pose(pose_path)
        assert np.array_equal(loaded, pose) and subject == "s00"

        joints_path = os.path.join(tmp, "joints.txt")
        write_joints(joints_path, joints)
        assert np.abs(read_joints(joints_path, 10) - joints).max() < 1e-6
        assert raises(ParseError, lambda: read_joints(joints_path, 16))
        with open(joints_path, "a", encoding="utf-8") as f:
            f.write("1.0 2.0\n")
        assert parse_error(lambda: read_joints(joints_path)).line == 11

        bad = os.path.join(tmp, "bad.json")
        with open(bad, "w", encoding="utf-8") as f:
            f.write('{\n  "pose": [1, 2,\n')
        assert parse_error(lambda: read_json(bad)).line is not None
        with open(bad, "w", encoding="utf-8") as f:
            f.write('{"pose": [1, 2, 3]}')
        assert raises(ParseError, lambda: read_pose(bad))


def test_storage_service_paths():
    with tempfile.TemporaryDirectory() as tmp:
        storage = StorageService(tmp)
        assert raises(ValueError, lambda: storage.resolve("../escape.txt"))
        assert raises(ValueError, lambda: storage.resolve("/etc/passwd"))
        target = asyncio.run(storage.save_upload(b"hello", "uploads/a.txt"))
        assert target.read_bytes() == b"hello"
        assert asyncio.run(storage.read_text("uploads/a.txt")) == "hello"
        assert storage.list_entries("uploads")[0]["name"] == "a.txt"
        assert storage.list_entries("missing") == []
        assert raises(FileNotFoundError, lambda: asyncio.run(storage.read_text("uploads/none.txt")))


def main():
    print("Testing storage formats")
    print("=" * 40)

    tests = [
        ("Checkpoint round trip", test_checkpoint_round_trip),
        ("Checkpoint corruption", test_checkpoint_corruption),
        ("OBJ round trip", test_obj_round_trip),
        ("PLY formats", test_ply_binary_and_ascii),
        ("Truncated PLY", test_truncated_ply),
        ("Images", test_images),
        ("Poses and joints", test_pose_and_joint_files),
        ("Storage paths", test_storage_service_paths),
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
