#!/usr/bin/env python3
"""
Tests for prior/full training, checkpoints and the command-line front-end
"""

import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

import cli
from backend.config import load_run_config
from backend.services.mesh_service import CodeRequest, MeshService, resolve_code
from backend.services.storage_service import load_dataset, read_json, read_png
from backend.services.synthetic_service import SyntheticService
from backend.services.training_service import ModelBundle, TrainingService, load_bundle, save_bundle

SMOKE_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "smoke.json")


def raises(exc, fn):
    try:
        fn()
    except exc:
        return True
    return False


def smoke_dataset(root):
    config = load_run_config(SMOKE_CONFIG)
    SyntheticService(workers=1).emit_dataset(root, config.synthetic, seed=0, progress=False)
    return load_dataset(root)


def log_records(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def test_prior_training():
    """Prior training writes a checkpoint and a log, and leaves color and density untouched"""
    config = load_run_config(SMOKE_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = smoke_dataset(os.path.join(tmp, "data"))
        result = TrainingService().train_prior(dataset, config, os.path.join(tmp, "prior"))
        assert result.steps == config.train.steps
        records = log_records(result.log)
        assert [r["step"] for r in records] == [1, 2, 3]
        assert {"surf", "normal", "eik", "reg", "total"} <= set(records[-1])

        bundle = load_bundle(result.checkpoint)
        assert bundle.latents.subjects == dataset.subjects
        assert bundle.metadata["kind"] == "prior" and bundle.metadata["step"] == 3
        fresh = ModelBundle.fresh(dataset.skeleton, config)
        for name, value in fresh.model.params.items():
            if name.startswith(("color.", "density.")):
                assert np.array_equal(bundle.model.params[name].data, value.data), name
        assert any(not np.array_equal(bundle.model.params[name].data, value.data)
                   for name, value in fresh.model.params.items() if name.startswith("sdf."))


def test_full_training_with_frozen_poses():
    """With the whole run inside the freeze window, refined poses equal the dataset estimates"""
    config = load_run_config(SMOKE_CONFIG, ["train.pose_freeze_fraction=1.0"])
    with tempfile.TemporaryDirectory() as tmp:
        dataset = smoke_dataset(os.path.join(tmp, "data"))
        result = TrainingService().train_full(dataset, config, os.path.join(tmp, "full"))
        bundle = load_bundle(result.checkpoint)
        assert bundle.calibration.cameras == ["cam00", "cam01"]
        assert sorted(bundle.poses) == sorted(f"pose.{f.name}" for f in dataset.frames)
        for frame in dataset.frames:
            assert np.array_equal(bundle.poses[f"pose.{frame.name}"].data, dataset.pose(frame))
        assert "col" in result.final_terms
        assert bundle.metadata["kind"] == "full"


def test_full_training_from_prior():
    config = load_run_config(SMOKE_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = smoke_dataset(os.path.join(tmp, "data"))
        service = TrainingService()
        prior = service.train_prior(dataset, config, os.path.join(tmp, "prior"))
        full = service.train_full(dataset, config, os.path.join(tmp, "full"), init_checkpoint=prior.checkpoint)
        assert service.last_result is full
        assert all(np.isfinite(v) for v in full.final_terms.values())
        assert load_bundle(full.checkpoint).latents.subjects == ["s00", "s01"]


def test_bundle_round_trip():
    """A saved bundle reloads with identical tensors and configuration"""
    config = load_run_config(SMOKE_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = smoke_dataset(os.path.join(tmp, "data"))
        bundle = ModelBundle.fresh(dataset.skeleton, config)
        bundle.latents.add("s00")
        bundle.calibration.add("cam00")
        bundle.pose_param("s00_p000", np.full((10, 3), 0.1))
        path = os.path.join(tmp, "model.afck")
        save_bundle(path, bundle, {"note": "test"})
        loaded = load_bundle(path)
        original = bundle.tensors()
        restored = loaded.tensors()
        assert set(original) == set(restored)
        for name in original:
            assert np.array_equal(original[name], restored[name]), name
        assert loaded.config == config
        assert loaded.metadata["note"] == "test"
        assert raises(FileNotFoundError, lambda: load_bundle(os.path.join(tmp, "missing.afck")))


def test_code_requests():
    config = load_run_config(SMOKE_CONFIG)
    with tempfile.TemporaryDirectory() as tmp:
        dataset = smoke_dataset(os.path.join(tmp, "data"))
        bundle = ModelBundle.fresh(dataset.skeleton, config)
        for subject in ("s00", "s01"):
            bundle.latents.add(subject)
    table = bundle.latents
    code, pose = resolve_code(bundle, CodeRequest(shape_subject="s00", color_subject="s01"))
    assert np.array_equal(code.shape.data, table["s00"].shape.data)
    assert np.array_equal(code.color.data, table["s01"].color.data)
    assert pose is None
    mixed, _ = resolve_code(bundle, CodeRequest(subject="s00", mix=0.0, mix_subject="s01"))
    assert np.allclose(mixed.shape.data, table["s00"].shape.data)
    assert raises(ValueError, lambda: resolve_code(bundle, CodeRequest(subject="s00", mix=1.5, mix_subject="s01")))
    assert raises(ValueError, lambda: resolve_code(bundle, CodeRequest(mix=0.5)))


def test_cli_pipeline():
    """gen-synthetic, train-prior, extract-mesh, render and eval from the command line"""
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        run = os.path.join(tmp, "run")
        assert cli.main(["gen-synthetic", "--config", SMOKE_CONFIG, "--out", data]) == cli.EXIT_OK
        assert read_json(Path(data) / "manifest.json")["frame_count"] == 4
        assert cli.main(["train-prior", "--config", SMOKE_CONFIG, "--dataset", data, "--out", run]) == cli.EXIT_OK
        assert os.path.exists(os.path.join(run, "config.json"))
        checkpoint = os.path.join(run, "model.afck")

        mesh = os.path.join(tmp, "mesh.obj")
        assert cli.main(["extract-mesh", "--config", SMOKE_CONFIG, "--checkpoint", checkpoint,
                         "--out", mesh, "--resolution", "16", "--subject", "s00"]) == cli.EXIT_OK
        assert os.path.exists(mesh)

        prefix = os.path.join(tmp, "view")
        camera = os.path.join(data, "cameras", "cam00.json")
        assert cli.main(["render", "--config", SMOKE_CONFIG, "--checkpoint", checkpoint, "--camera", camera,
                         "--out", prefix, "--mode", "weights"]) == cli.EXIT_OK
        assert os.path.exists(prefix + ".png") and os.path.exists(prefix + "_depth.npy")

        reference = os.path.join(data, "images", "s00_p000_cam00.png")
        scores = os.path.join(tmp, "eval.json")
        assert cli.main(["eval", "--config", SMOKE_CONFIG, "--image", prefix + ".png",
                         "--reference-image", reference, "--out", scores]) == cli.EXIT_OK
        assert 0.0 < read_json(scores)["psnr_db"] <= 99.0

        summary = MeshService().extract(checkpoint, os.path.join(tmp, "again.obj"), resolution=16)
        assert summary["vertices"] >= 0


def test_cli_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "data")
        assert cli.main(["gen-synthetic", "--config", SMOKE_CONFIG, "--set", "synthetic.n_poses=0",
                         "--out", out]) == cli.EXIT_CONFIG
        assert cli.main(["gen-synthetic", "--config", SMOKE_CONFIG, "--set", "no-equals-sign",
                         "--out", out]) == cli.EXIT_CONFIG
        assert cli.main(["gen-synthetic", "--config", os.path.join(tmp, "missing.json"),
                         "--out", out]) == cli.EXIT_CONFIG
        assert cli.main(["extract-mesh", "--config", SMOKE_CONFIG, "--checkpoint",
                         os.path.join(tmp, "missing.afck"), "--out", os.path.join(tmp, "m.obj")]) == cli.EXIT_RUNTIME
        assert raises(SystemExit, lambda: cli.main(["train"]))


def test_cli_render_settings():
    """extract-mesh and render honor the checkpoint's render settings, --set overrides and --seed"""
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        run = os.path.join(tmp, "run")
        assert cli.main(["gen-synthetic", "--config", SMOKE_CONFIG, "--out", data]) == cli.EXIT_OK
        assert cli.main(["train-prior", "--config", SMOKE_CONFIG, "--dataset", data, "--out", run]) == cli.EXIT_OK
        checkpoint = os.path.join(run, "model.afck")
        camera = os.path.join(data, "cameras", "cam00.json")

        service = MeshService()
        stored = service.render_config(checkpoint)
        assert stored.n_coarse == 8 and stored.n_fine == 4
        assert service.render_config(checkpoint, None, ["render.n_coarse=5"]).n_coarse == 5
        assert service.render_config(checkpoint, SMOKE_CONFIG, ["render.background=[0,0,0]"]).background == [0, 0, 0]
        assert raises(ValueError, lambda: service.render_config(checkpoint, None, ["render.n_coarse=0"]))

        white = os.path.join(tmp, "white")
        black = os.path.join(tmp, "black")
        assert cli.main(["render", "--checkpoint", checkpoint, "--camera", camera, "--out", white]) == cli.EXIT_OK
        assert cli.main(["render", "--checkpoint", checkpoint, "--camera", camera, "--out", black,
                         "--set", "render.background=[0,0,0]"]) == cli.EXIT_OK
        opacity = np.load(white + "_opacity.npy")
        clear = opacity < 0.5
        assert clear.any()
        assert read_png(white + ".png")[clear].mean() > read_png(black + ".png")[clear].mean()

        for name in ("seeded_a", "seeded_b"):
            assert cli.main(["render", "--checkpoint", checkpoint, "--camera", camera,
                             "--out", os.path.join(tmp, name), "--seed", "7"]) == cli.EXIT_OK
        assert np.array_equal(np.load(os.path.join(tmp, "seeded_a_depth.npy")),
                              np.load(os.path.join(tmp, "seeded_b_depth.npy")))

        mesh = os.path.join(tmp, "m.obj")
        assert cli.main(["extract-mesh", "--checkpoint", checkpoint, "--out", mesh, "--resolution", "16",
                         "--set", "render.bbox_padding=-1"]) == cli.EXIT_CONFIG
        assert cli.main(["render", "--checkpoint", checkpoint, "--camera", camera, "--out", white,
                         "--set", "render.n_coarse=0"]) == cli.EXIT_CONFIG


def main():
    print("Testing training and the CLI")
    print("=" * 40)

    tests = [
        ("Prior training", test_prior_training),
        ("Full training, frozen poses", test_full_training_with_frozen_poses),
        ("Full training from a prior", test_full_training_from_prior),
        ("Bundle round trip", test_bundle_round_trip),
        ("Code requests", test_code_requests),
        ("CLI pipeline", test_cli_pipeline),
        ("CLI exit codes", test_cli_exit_codes),
        ("CLI render settings", test_cli_render_settings),
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
