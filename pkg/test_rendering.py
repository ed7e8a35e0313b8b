#!/usr/bin/env python3
"""
Tests for cameras, rays, density conversion and volume rendering
"""

import os
import sys
import tempfile
from types import SimpleNamespace

import numpy as np

from backend.config import ModelConfig, RenderConfig
from backend.core.gradcheck import check_gradient
from backend.core.implicit_model import ImplicitModel, LatentCode
from backend.core.kinematics import Joint, Skeleton, forward_kinematics, skeleton_bounds
from backend.core.rendering import (
    CalibrationTable, Camera, RayBundle, apply_calibration, composite, density, generate_rays,
    project, project_points, ray_box_intersect, render_image, render_ray, render_rays, ring_cameras,
    sample_intervals, stratified_depths, unproject,
)
from backend.core.tensor import Tensor, as_tensor, backward, parameter

RNG = np.random.default_rng(13)


def raises(exc, fn):
    try:
        fn()
    except exc:
        return True
    return False


def tiny_model(**changes):
    config = ModelConfig(skeleton="test10", latent_dim=4, encoding_freqs=1, view_freqs=0, use_view_dir=False,
                         sdf_hidden=[8], color_hidden=[8], weight_hidden=[8], **changes)
    return ImplicitModel(Skeleton.load("test10"), config, seed=0)


def tiny_render_config(**changes):
    base = dict(n_coarse=16, n_fine=8, perturb=False, chunk=32)
    base.update(changes)
    return RenderConfig(**base)


def zero_code(dim=4):
    return LatentCode.from_arrays(np.zeros(dim), np.zeros(dim))


def frontal_camera(size=8):
    return Camera.look_at([0.0, 0.06, 0.4], [0.0, 0.06, 0.0], width=size, height=size)


def test_density():
    """σ is α/2 on the surface and saturates to α inside and 0 outside"""
    s = np.array([-1.0, -0.01, 0.0, 0.01, 1.0])
    sigma = density(s, 10.0, 0.01).data
    assert np.isclose(sigma[2], 5.0)
    assert np.isclose(sigma[0], 10.0) and np.isclose(sigma[4], 0.0)
    assert np.isclose(sigma[1], 10.0 * (1.0 - 0.5 * np.exp(-1.0)))
    assert np.all(np.diff(sigma) <= 0.0)


def test_constant_density_quadrature():
    """Constant σ over [0, 1] gives opacity 1 − exp(−σ) and blends in the background"""
    m, n, c = 3, 10, 2.5
    near, far = np.zeros(m), np.ones(m)
    depths = stratified_depths(near, far, n, perturb=False)
    colors = np.broadcast_to([0.2, 0.4, 0.6], (m, n, 3))
    out = composite(np.full((m, n), c), colors, depths, near, far, background=[1.0, 1.0, 1.0])
    expected = 1.0 - np.exp(-c)
    assert np.allclose(out.opacity.data, expected)
    assert np.allclose(out.rgb.data, np.array([0.2, 0.4, 0.6]) * expected + np.exp(-c))
    assert np.allclose(out.weights.data.sum(axis=1), expected)
    assert np.allclose(out.transmittance.data[:, 0], 1.0)

    for n in (64, 128, 256):
        depths = stratified_depths(np.zeros(1), np.ones(1), n, perturb=False)
        opacity = composite(np.ones((1, n)), np.zeros((1, n, 3)), depths, np.zeros(1), np.ones(1)).opacity.item()
        assert abs(opacity - (1.0 - np.exp(-1.0))) / (1.0 - np.exp(-1.0)) < 1e-3


def test_intervals_cover_the_ray():
    """Jittered or not, the sample intervals tile [near, far] exactly"""
    near, far = np.array([0.1, 0.5]), np.array([0.9, 2.0])
    rng = np.random.default_rng(5)
    for depths in (stratified_depths(near, far, 16, perturb=False), stratified_depths(near, far, 16, rng)):
        deltas = sample_intervals(depths, near, far)
        assert np.all(deltas >= 0.0)
        assert np.allclose(deltas.sum(axis=1), far - near)
    jittered = stratified_depths(near, far, 16, rng)
    out = composite(np.full((2, 16), 1.5), np.zeros((2, 16, 3)), jittered, near, far)
    assert np.allclose(out.opacity.data, 1.0 - np.exp(-1.5 * (far - near)))
    assert raises(ValueError, lambda: stratified_depths(near, far, 4))


def test_quadrature_converges():
    """σ(t) = 1 + t² on [0, 1]: the opacity error shrinks at least 1.5× per doubling of the sample count"""
    exact = 1.0 - np.exp(-4.0 / 3.0)
    errors = []
    for n in (32, 64, 128, 256):
        depths = stratified_depths(np.zeros(1), np.ones(1), n, perturb=False)
        out = composite(1.0 + depths ** 2, np.ones((1, n, 3)), depths, np.zeros(1), np.ones(1))
        errors.append(abs(out.opacity.item() - exact))
    assert all(coarse >= 1.5 * fine for coarse, fine in zip(errors, errors[1:]))
    assert errors[2] / exact < 1e-3


def test_composite_gradient():
    depths = np.sort(RNG.uniform(0.0, 1.0, size=(2, 6)), axis=1)
    colors = RNG.uniform(size=(2, 6, 3))
    near, far = np.zeros(2), np.full(2, 1.2)
    sigma = RNG.uniform(0.1, 3.0, size=(2, 6))
    assert check_gradient(lambda t: composite(t, colors, depths, near, far, [1.0, 0.5, 0.0]).rgb, sigma) < 1e-6


def test_camera_validation_and_io():
    assert raises(ValueError, lambda: Camera(-1.0, 1.0, 0.0, 0.0, 4, 4))
    assert raises(ValueError, lambda: Camera(1.0, 1.0, 0.0, 0.0, 4, 4, rotation=np.diag([1.0, 1.0, -1.0])))
    assert raises(ValueError, lambda: Camera.look_at([0, 1, 0], [0, 0, 0], up=(0, 1, 0)))
    camera = frontal_camera()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "cam.json")
        camera.save(path)
        loaded = Camera.load(path)
    assert np.allclose(loaded.rotation, camera.rotation)
    assert np.allclose(loaded.K, camera.K)
    assert np.allclose(loaded.center, [0.0, 0.06, 0.4])
    assert raises(FileNotFoundError, lambda: Camera.load("/nonexistent/cam.json"))


def test_ring_cameras_look_at_target():
    cameras = ring_cameras(4, 0.5, 0.1, [0.0, 0.05, 0.0], width=16, image_height=16)
    assert [c.name for c in cameras] == ["cam00", "cam01", "cam02", "cam03"]
    for camera in cameras:
        assert np.allclose(project_points(np.array([[0.0, 0.05, 0.0]]), camera), [[8.0, 8.0]])


def test_projection():
    """Projecting a point on a pixel's ray lands on that pixel center"""
    camera = frontal_camera(16)
    uv = np.array([[3.5, 12.5], [8.0, 8.0]])
    origins, dirs = unproject(camera, uv)
    points = origins + 0.3 * dirs
    assert np.allclose(project_points(points, camera), uv)
    assert np.allclose(project(points, camera).data, uv)
    behind = camera.center + np.array([0.0, 0.0, 0.1])
    assert raises(ValueError, lambda: project(behind, camera))
    assert check_gradient(lambda t: project(t, camera), points) < 1e-6


def test_generate_rays():
    camera = frontal_camera(8)
    rays = generate_rays(camera, np.array([[0, 0], [7, 7]]), n_samples=5, perturb=False)
    assert len(rays) == 2
    assert np.allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)
    assert rays.depths.shape == (2, 5)
    assert np.all(np.diff(rays.depths, axis=1) > 0)
    assert raises(IndexError, lambda: generate_rays(camera, np.array([[8, 0]])))
    assert raises(IndexError, lambda: generate_rays(camera, np.array([[0, -1]])))
    assert raises(ValueError, lambda: generate_rays(camera, np.array([[0, 0]]), n_samples=4, perturb=True))


def test_ray_box():
    box = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    origins = np.array([[0.0, 0.0, 5.0], [0.0, 3.0, 5.0]])
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    near, far, hit = ray_box_intersect(origins, dirs, box)
    assert hit.tolist() == [True, False]
    assert np.isclose(near[0], 4.0) and np.isclose(far[0], 6.0)


def test_missed_rays_are_background():
    model = tiny_model()
    config = tiny_render_config(background=[0.1, 0.2, 0.3])
    rays = RayBundle(np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, 1.0]]), np.zeros(1), np.ones(1))
    out = render_rays(model, rays, None, zero_code(), config)
    assert not out.hit[0]
    assert np.allclose(out.rgb.data, [[0.1, 0.2, 0.3]])
    assert out.opacity.data[0] == 0.0


def test_render_ray_hits_palm():
    """A ray through the untrained palm sphere is nearly opaque"""
    model = tiny_model()
    rgb, opacity = render_ray(model, [0.0, 0.0, 0.4], [0.0, 0.0, -1.0], None, zero_code(),
                              tiny_render_config(n_coarse=64))
    assert rgb.shape == (3,)
    assert opacity.item() > 0.9
    assert np.all((rgb.data >= 0.0) & (rgb.data <= 1.0 + 1e-9))


def test_render_gradients():
    """Color codes, density scale and calibration all receive gradients through the renderer"""
    model = tiny_model()
    config = tiny_render_config()
    origins = np.array([[0.0, 0.0, 0.4], [-0.022, 0.08, 0.4]])
    dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    rays = RayBundle(origins, dirs, np.zeros(2), np.ones(2))
    shape = np.zeros(4)

    def rgb_of_color_code(t):
        return render_rays(model, rays, None, LatentCode(Tensor(shape), t), config).rgb

    assert check_gradient(rgb_of_color_code, RNG.normal(size=4)) < 1e-5

    calibration = CalibrationTable(["cam00"])
    gain, bias = calibration.get("cam00")
    code = LatentCode.from_arrays(shape, RNG.normal(size=4))
    pose = parameter(np.zeros((10, 3)))
    out = render_rays(model, rays, pose, code, config, calibration=(gain, bias))
    loss = (out.rgb - 0.5).abs().mean()
    g_gain, g_bias, g_beta, g_pose = backward(loss, [gain, bias, model.params["density.beta"], pose])
    assert np.any(g_gain != 0.0) and np.any(g_bias != 0.0)
    assert np.all(np.isfinite(g_beta)) and np.all(np.isfinite(g_pose))
    assert np.any(g_pose != 0.0)


def test_calibration_table():
    table = CalibrationTable(["b", "a"])
    table.add("a")
    assert table.cameras == ["a", "b"]
    gain, bias = table.get("a")
    gain.data = np.array([2.0, 2.0, 2.0])
    bias.data = np.array([0.1, 0.0, 0.0])
    mean_gain, mean_bias = table.mean()
    assert np.allclose(mean_gain, 1.5) and np.allclose(mean_bias, [0.05, 0.0, 0.0])
    out = apply_calibration(Tensor([[0.5, 0.5, 0.5]]), gain, bias).data
    assert np.allclose(out, [[1.1, 1.0, 1.0]])
    restored = CalibrationTable()
    restored.load_state_dict(table.state_dict())
    assert restored.cameras == ["a", "b"]
    assert raises(KeyError, lambda: table.get("zzz"))
    assert np.allclose(CalibrationTable().mean()[0], 1.0)


def test_render_image_modes():
    model = tiny_model()
    camera = frontal_camera(8)
    config = tiny_render_config()
    for mode in ("color", "normals", "weights"):
        out = render_image(model, camera, None, zero_code(), config, mode=mode)
        assert out["rgb"].shape == (8, 8, 3)
        assert out["opacity"].shape == (8, 8) and out["depth"].shape == (8, 8)
        assert np.all((out["rgb"] >= 0.0) & (out["rgb"] <= 1.0))
        assert np.all(out["depth"][out["opacity"] <= 1e-6] == 0.0)
    assert raises(ValueError, lambda: render_image(model, camera, None, zero_code(), config, mode="x"))


def test_density_tail():
    """Ten β outside the surface the density is negligible"""
    alpha, beta = 50.0, 0.01
    assert density([10.0 * beta], alpha, beta).item() < 1e-4 * alpha


def test_piecewise_density_quadrature():
    """Two constant segments along one ray give 1 − exp(−(σ₁ + σ₂)/2) over [0, 1]"""
    n = 64
    depths = stratified_depths(np.zeros(1), np.ones(1), n, perturb=False)
    sigma = np.where(depths < 0.5, 1.5, 4.0)
    colors = np.ones((1, n, 3))
    out = composite(sigma, colors, depths, np.zeros(1), np.ones(1))
    assert np.isclose(out.opacity.item(), 1.0 - np.exp(-(1.5 + 4.0) / 2.0))

    shifted = stratified_depths(np.full(1, 0.25), np.full(1, 1.25), 128, perturb=False)
    dense = composite(np.full((1, 128), 3.0), np.ones((1, 128, 3)), shifted, np.full(1, 0.25), np.full(1, 1.25))
    expected = 1.0 - np.exp(-3.0)
    assert abs(dense.opacity.item() - expected) / expected < 1e-3


def test_render_ray_constant_density():
    """render_ray through a constant field matches 1 − exp(−σ L) over the box chord, fine samples included"""
    model = tiny_model(init_alpha=20.0)
    color = np.array([0.2, 0.4, 0.6])

    def constant_field(x, view_dirs, pose, shape_code, color_code=None, transforms=None):
        n = len(as_tensor(x).data)
        rgb = None if color_code is None else Tensor(np.tile(color, (n, 1)))
        return SimpleNamespace(sdf=Tensor(np.zeros(n)), color=rgb)

    model.eval_field = constant_field
    config = tiny_render_config(n_coarse=32, n_fine=16, background=[1.0, 1.0, 1.0])
    origin, direction = np.array([0.0, 0.06, 0.4]), np.array([0.0, 0.0, -1.0])
    rgb, opacity = render_ray(model, origin, direction, None, zero_code(), config)

    box = skeleton_bounds(forward_kinematics(model.skeleton).detach(), model.skeleton.bone_segments(),
                          config.bbox_padding)
    near, far, hit = ray_box_intersect(origin[None], direction[None], box)
    assert hit[0]
    tau = 0.5 * model.alpha.item() * (far[0] - near[0])
    assert np.isclose(opacity.item(), 1.0 - np.exp(-tau), rtol=1e-9)
    assert np.allclose(rgb.data, color * (1.0 - np.exp(-tau)) + np.exp(-tau), rtol=1e-9)


def test_box_follows_subject_skeleton():
    """A ray beyond the template's reach hits the box of a longer subject skeleton"""
    model = tiny_model()
    template = model.skeleton
    long = Skeleton([Joint(j.name, j.parent, tuple(2.0 * np.asarray(j.offset))) for j in template.joints], "test10")
    config = tiny_render_config(n_fine=0)
    top = skeleton_bounds(forward_kinematics(template).detach(), template.bone_segments(), config.bbox_padding)[1, 1]
    long_top = skeleton_bounds(forward_kinematics(long).detach(), long.bone_segments(), config.bbox_padding)[1, 1]
    y = 0.5 * (top + long_top)
    rays = RayBundle(np.array([[0.0, y, 0.4]]), np.array([[0.0, 0.0, -1.0]]), np.zeros(1), np.ones(1))
    assert not render_rays(model, rays, None, zero_code(), config).hit[0]
    assert render_rays(model, rays, None, zero_code(), config, skeleton=long).hit[0]


def test_principal_point_and_focal_length():
    """The principal point looks down the optical axis; doubling fx doubles horizontal offsets"""
    camera = frontal_camera(16)
    _, dirs = unproject(camera, np.array([[camera.cx, camera.cy]]))
    assert np.allclose(dirs[0], [0.0, 0.0, -1.0])
    wide = Camera(camera.fx * 2.0, camera.fy, camera.cx, camera.cy, 16, 16, camera.rotation, camera.translation)
    point = np.array([[0.01, 0.07, 0.0]])
    u = project_points(point, camera)[0, 0] - camera.cx
    u_wide = project_points(point, wide)[0, 0] - camera.cx
    assert np.isclose(u_wide, 2.0 * u)


def main():
    print("Testing rendering")
    print("=" * 40)

    tests = [
        ("Density", test_density),
        ("Constant-density quadrature", test_constant_density_quadrature),
        ("Intervals cover the ray", test_intervals_cover_the_ray),
        ("Quadrature convergence", test_quadrature_converges),
        ("Composite gradient", test_composite_gradient),
        ("Camera validation and IO", test_camera_validation_and_io),
        ("Ring cameras", test_ring_cameras_look_at_target),
        ("Projection", test_projection),
        ("Ray generation", test_generate_rays),
        ("Ray/box intersection", test_ray_box),
        ("Missed rays", test_missed_rays_are_background),
        ("Ray through the palm", test_render_ray_hits_palm),
        ("Render gradients", test_render_gradients),
        ("Calibration table", test_calibration_table),
        ("Render modes", test_render_image_modes),
        ("Density tail", test_density_tail),
        ("Piecewise quadrature", test_piecewise_density_quadrature),
        ("Constant-density render_ray", test_render_ray_constant_density),
        ("Box follows the subject", test_box_follows_subject_skeleton),
        ("Principal point", test_principal_point_and_focal_length),
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
