#!/usr/bin/env python3
"""
End-to-end smoke run against a running ArtiField backend

Start the server first (python start_backend.py), then run this script.
Everything it writes lands under smoke/ in the server's data directory.
"""

import io
import json
import os
import sys
import tempfile

import numpy as np
import requests

from backend.services.storage_service import write_cloud

BASE_URL = os.getenv("ARTIFIELD_API_URL", f"http://localhost:{os.getenv('ARTIFIELD_API_PORT', '8000')}")

# Same settings as configs/smoke.json, passed as overrides so no config file has to be uploaded
SMOKE_OVERRIDES = [
    "model.skeleton=test10", "model.latent_dim=4", "model.encoding_freqs=1", "model.view_freqs=0",
    "model.use_view_dir=false", "model.sdf_hidden=[8]", "model.color_hidden=[8]", "model.weight_hidden=[8]",
    "render.n_coarse=8", "render.n_fine=4", "render.chunk=512",
    "train.steps=3", "train.rays_per_batch=16", "train.surface_points_per_batch=32", "train.eikonal_points=16",
    "fit.pose_steps=2", "fit.joint_steps=2", "fit.cloud_steps=3", "fit.rays_per_iter=16", "fit.min_points=10",
    "synthetic.skeleton=test10", "synthetic.n_subjects=2", "synthetic.n_poses=1", "synthetic.n_cameras=2",
    "synthetic.image_size=16", "synthetic.scan_points=128",
]


def post(path, payload):
    response = requests.post(f"{BASE_URL}{path}", json=payload, timeout=600)
    print(f"{path}: {response.status_code}")
    if response.status_code != 200:
        print(f"Error: {response.text}")
    return response


def test_health():
    """Test health endpoint"""
    try:
        response = requests.get(f"{BASE_URL}/health", timeout=10)
        print(f"Health: {response.status_code} - {response.json()}")
        return response.status_code == 200
    except Exception as e:
        print(f"Health failed: {e}")
        return False


def test_skeletons():
    try:
        response = requests.get(f"{BASE_URL}/api/synthetic/skeletons", timeout=10)
        print(f"Skeletons: {response.status_code} - {response.json()}")
        return response.status_code == 200 and "test10" in response.json()
    except Exception as e:
        print(f"Skeletons failed: {e}")
        return False


def test_generate():
    """Test synthetic dataset generation"""
    try:
        response = post("/api/synthetic/generate", {"overrides": SMOKE_OVERRIDES, "out": "smoke/data"})
        if response.status_code != 200:
            return False
        data = response.json()
        print(f"Views: {data['frame_count']}, scans: {data['scan_count']}")
        return data["frame_count"] == 4 and data["scan_count"] == 2
    except Exception as e:
        print(f"Generate failed: {e}")
        return False


def test_train_prior():
    try:
        response = post("/api/training/prior", {"overrides": SMOKE_OVERRIDES, "dataset": "smoke/data",
                                                "out": "smoke/prior"})
        if response.status_code != 200:
            return False
        data = response.json()
        print(f"Checkpoint: {data['checkpoint']}, final terms: {data['final_terms']}")
        return data["steps"] == 3
    except Exception as e:
        print(f"Prior training failed: {e}")
        return False


def test_train_full():
    try:
        response = post("/api/training/full", {"overrides": SMOKE_OVERRIDES, "dataset": "smoke/data",
                                               "out": "smoke/full", "init_checkpoint": "smoke/prior/model.afck"})
        return response.status_code == 200 and "col" in response.json()["final_terms"]
    except Exception as e:
        print(f"Full training failed: {e}")
        return False


def test_fit_cloud():
    """Upload a small sphere cloud around the palm and fit to it"""
    try:
        listing = requests.get(f"{BASE_URL}/api/synthetic/datasets", timeout=10)
        print(f"Datasets: {listing.status_code}")
        directions = np.random.default_rng(0).normal(size=(200, 3))
        points = 0.03 * directions / np.linalg.norm(directions, axis=-1, keepdims=True) + [0.0, 0.04, 0.0]
        with tempfile.TemporaryDirectory() as tmp:
            scan_path = os.path.join(tmp, "sphere.ply")
            write_cloud(scan_path, points)
            with open(scan_path, "rb") as f:
                content = f.read()
        with io.BytesIO(content) as f:
            response = requests.post(
                f"{BASE_URL}/api/fitting/cloud",
                data={"checkpoint": "smoke/full/model.afck", "out": "smoke/fit_cloud",
                      "overrides": json.dumps(SMOKE_OVERRIDES)},
                files={"cloud": ("scan.ply", f, "application/octet-stream")},
                timeout=600,
            )
        print(f"Cloud fit: {response.status_code}")
        if response.status_code != 200:
            print(f"Error: {response.text}")
            return False
        return response.json()["mode"] == "cloud"
    except Exception as e:
        print(f"Cloud fit failed: {e}")
        return False


def test_fit_images():
    try:
        response = post("/api/fitting/images", {"overrides": SMOKE_OVERRIDES, "checkpoint": "smoke/full/model.afck",
                                                "dataset": "smoke/data", "frame": "s00_p000",
                                                "out": "smoke/fit_images"})
        if response.status_code != 200:
            return False
        report = requests.get(f"{BASE_URL}/api/fitting/reports/smoke/fit_images", timeout=10)
        print(f"Report: {report.status_code}")
        return report.status_code == 200 and report.json()["mode"] == "images"
    except Exception as e:
        print(f"Image fit failed: {e}")
        return False


def test_extract_and_eval():
    try:
        response = post("/api/meshing/extract", {"checkpoint": "smoke/full/model.afck", "out": "smoke/mesh.obj",
                                                 "resolution": 32, "report": "smoke/fit_images/fit_report.json"})
        if response.status_code != 200:
            return False
        print(f"Mesh: {response.json()}")
        if response.json()["empty"]:
            print("⚠️  Extracted mesh is empty; skipping mesh evaluation")
            return True
        response = post("/api/meshing/eval", {"mesh": "smoke/mesh.obj", "dataset": "smoke/data",
                                              "frame": "s00_p000", "resolution": 32})
        if response.status_code != 200:
            return False
        print(f"Scores: {response.json()}")
        return response.json()["v2v_a_to_b_mm"] is not None
    except Exception as e:
        print(f"Extract/eval failed: {e}")
        return False


def test_render():
    try:
        response = post("/api/meshing/render", {"checkpoint": "smoke/full/model.afck",
                                                "camera": "smoke/data/cameras/cam00.json",
                                                "out": "smoke/render/cam00", "subject": "s00"})
        return response.status_code == 200
    except Exception as e:
        print(f"Render failed: {e}")
        return False


def test_bad_requests():
    """Bad input maps to 400, missing files to 404"""
    try:
        bad = post("/api/synthetic/generate", {"overrides": ["synthetic.n_poses=0"], "out": "smoke/bad"})
        missing = post("/api/meshing/extract", {"checkpoint": "smoke/none.afck", "out": "smoke/none.obj"})
        escape = post("/api/meshing/extract", {"checkpoint": "../outside.afck", "out": "smoke/none.obj"})
        return bad.status_code == 400 and missing.status_code == 404 and escape.status_code == 400
    except Exception as e:
        print(f"Bad request checks failed: {e}")
        return False


def main():
    print("ArtiField API smoke run")
    print("=" * 40)

    tests = [
        ("Health", test_health),
        ("Skeletons", test_skeletons),
        ("Generate", test_generate),
        ("Prior training", test_train_prior),
        ("Full training", test_train_full),
        ("Cloud fit", test_fit_cloud),
        ("Image fit", test_fit_images),
        ("Extract and eval", test_extract_and_eval),
        ("Render", test_render),
        ("Bad requests", test_bad_requests),
    ]

    results = []
    for name, test_func in tests:
        print(f"\n{name}:")
        results.append((name, test_func()))

    print("\n" + "=" * 40)
    print("Results:")
    for name, result in results:
        status = "PASS" if result else "FAIL"
        print(f"{name}: {status}")
    return all(result for _, result in results)


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
