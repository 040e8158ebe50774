import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinwm.scene import ConvexPolytope, HalfSpacePlane, SceneError, Sphere
from pinwm.splats import (
    Camera,
    FitConfig,
    SplatSet,
    fit_appearance,
    init_splats_on_surface,
    look_at,
    pose_gradient,
    ppm_bytes,
    read_ppm,
    render,
    render_at_pose,
    render_loss,
    transform_splats,
    write_ppm,
)
from pinwm.so3 import axis_angle_to_quat, pose_to_transform, quat_mul, transform_inverse

CAM = Camera(64.0, 64.0, 32.0, 32.0, 64, 64)  # identity extrinsic: looking down +z


def facing_splats(*layers, scale=0.1):
    """Splats on the optical axis facing the camera: ``(depth, opacity, color)``."""
    n = len(layers)
    return SplatSet(
        np.array([[0.0, 0.0, d] for d, _, _ in layers]),
        np.tile([1.0, 0.0, 0.0], (n, 1)),
        np.tile([0.0, 1.0, 0.0], (n, 1)),
        np.full((n, 2), scale),
        np.array([o for _, o, _ in layers]),
        np.array([c for _, _, c in layers], dtype=float),
    )


def test_single_splat_center_pixel():
    img = render(facing_splats((1.0, 1.0, (1, 0, 0))), CAM)
    np.testing.assert_allclose(img[32, 32], [1, 0, 0], atol=1e-12)


def test_background_is_black():
    img = render(facing_splats((1.0, 1.0, (1, 0, 0)), scale=0.02), CAM)
    np.testing.assert_array_equal(img[0, 0], [0, 0, 0])


def test_two_splat_blend():
    ss = facing_splats((2.0, 1.0, (0, 0, 1)), (1.0, 0.5, (1, 0, 0)))
    np.testing.assert_allclose(render(ss, CAM)[32, 32], [0.5, 0, 0.5], atol=1e-12)


def test_behind_camera_is_black():
    img = render(facing_splats((-1.0, 1.0, (1, 1, 1))), CAM)
    assert img.max() == 0.0


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        render(facing_splats(), CAM)


def test_init_single_splat_on_square_face():
    square = ConvexPolytope(((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)), ((0, 1, 2, 3),))
    # a one-face polytope is enough for the sampler even though it has no volume
    ss = init_splats_on_surface(square, 1, seed=3)
    assert ss.centers[0, 2] == 0.0
    assert 0 <= ss.centers[0, 0] <= 1 and 0 <= ss.centers[0, 1] <= 1
    np.testing.assert_allclose(np.abs(ss.normals[0]), [0, 0, 1])


def test_init_is_deterministic():
    box = ConvexPolytope.box([0.05, 0.05, 0.025])
    a, b = init_splats_on_surface(box, 50, seed=7), init_splats_on_surface(box, 50, seed=7)
    for name in ("centers", "t_u", "t_v", "scales", "opacity", "colors"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    a.validate()


def test_init_face_counts_follow_area():
    ss = init_splats_on_surface(ConvexPolytope.box([0.5, 0.5, 0.5]), 600, seed=0)
    face = np.argmax(np.abs(ss.centers), axis=1) * 2 + (ss.centers[np.arange(600), np.argmax(np.abs(ss.centers), axis=1)] > 0)
    counts = np.bincount(face, minlength=6)
    sigma = math.sqrt(600 * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - 100) <= 3 * sigma)


def test_init_on_sphere_and_plane():
    ss = init_splats_on_surface(Sphere(0.1), 40, seed=1)
    np.testing.assert_allclose(np.linalg.norm(ss.centers, axis=1), 0.1)
    ss.validate()
    with pytest.raises(SceneError):
        init_splats_on_surface(HalfSpacePlane((0, 0, 1), 0.0), 10)


def test_transform_examples():
    ss = init_splats_on_surface(ConvexPolytope.box([0.1, 0.1, 0.1]), 20, seed=0)
    same = transform_splats(ss, np.eye(4))
    np.testing.assert_array_equal(same.centers, ss.centers)
    moved = transform_splats(ss, pose_to_transform([1, 0, 0], [1, 0, 0, 0]))
    np.testing.assert_allclose(moved.centers, ss.centers + [1, 0, 0])
    np.testing.assert_array_equal(moved.t_u, ss.t_u)
    one = SplatSet(np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]), np.ones((1, 2)), np.ones(1), np.ones((1, 3)))
    s = math.sqrt(0.5)
    rot = transform_splats(one, pose_to_transform([0, 0, 0], [s, 0, 0, s]))
    np.testing.assert_allclose(rot.t_u[0], [0, 1, 0], atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=6, max_size=6))
def test_transform_composes(v):
    ss = init_splats_on_surface(ConvexPolytope.box([0.1, 0.1, 0.1]), 10, seed=0)
    T1 = pose_to_transform(v[:3], axis_angle_to_quat(v[3:]))
    T2 = pose_to_transform(v[3:], axis_angle_to_quat(v[:3]))
    a = transform_splats(transform_splats(ss, T1), T2)
    b = transform_splats(ss, T2)
    np.testing.assert_allclose(a.centers, b.centers, atol=1e-12)


def box_scene(n=150, size=64):
    ss = init_splats_on_surface(ConvexPolytope.box([0.05, 0.05, 0.025]), n, seed=0)
    rng = np.random.default_rng(0)
    ss = SplatSet(ss.centers, ss.t_u, ss.t_v, ss.scales, ss.opacity, rng.uniform(0.1, 0.9, (n, 3)))
    cam = look_at([0.05, -0.3, 0.3], [0.0, 0.0, 0.0], size=size)
    return ss, cam


def test_object_motion_equals_inverse_camera_motion():
    ss, cam = box_scene()
    T = pose_to_transform([0.01, -0.02, 0.015], axis_angle_to_quat([0.1, -0.2, 0.3]))
    a = render(transform_splats(ss, T), cam)
    b = render(ss, cam.moved(T))
    assert np.abs(a - b).max() <= 1e-6
    assert a.max() > 0.1


def test_identical_images_zero_loss_and_gradient():
    ss, cam = box_scene()
    p, q = np.array([0.0, 0.0, 0.025]), np.array([1.0, 0.0, 0.0, 0.0])
    obs = render_at_pose(ss, cam, p, q)
    assert render_loss(obs, obs) == 0.0
    loss, g = pose_gradient(ss, cam, p, q, obs)
    assert loss == 0.0
    np.testing.assert_array_equal(g, 0.0)


def test_render_loss_shape_mismatch():
    with pytest.raises(ValueError):
        render_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def pose_fd(ss, cam, p, q, obs, eps=1e-6):
    def loss(x):
        qq = quat_mul(axis_angle_to_quat(x[3:]), q)
        return render_loss(render_at_pose(ss, cam, p + x[:3], qq), obs)

    g = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = eps
        g[i] = (loss(e) - loss(-e)) / (2 * eps)
    return g


def test_pose_gradient_matches_fd():
    ss, cam = box_scene()
    q_obs = axis_angle_to_quat([0.0, 0.0, 0.1])
    obs = render_at_pose(ss, cam, [0.01, 0.0, 0.025], q_obs)
    p, q = np.array([0.0, 0.005, 0.025]), axis_angle_to_quat([0.02, -0.01, 0.0])
    _, g = pose_gradient(ss, cam, p, q, obs)
    fd = pose_fd(ss, cam, p, q, obs)
    assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-2


def test_fit_fixed_point():
    ss, _ = box_scene(n=40, size=24)
    cams = [look_at([0.3 * math.cos(a), 0.3 * math.sin(a), 0.25], [0, 0, 0], size=24) for a in (0.3, 2.4, 4.5)]
    imgs = [render(ss, c) for c in cams]
    fitted, loss = fit_appearance(imgs, cams, ss)
    assert loss <= 1e-8
    for name in ("opacity", "colors", "scales"):
        np.testing.assert_allclose(getattr(fitted, name), getattr(ss, name), atol=1e-6)


def test_fit_recovers_red_cube():
    box = ConvexPolytope.box([0.05, 0.05, 0.05])
    gray = init_splats_on_surface(box, 60, seed=2)
    red = SplatSet(gray.centers, gray.t_u, gray.t_v, gray.scales, gray.opacity, np.tile([1.0, 0, 0], (60, 1)))
    # views alternate above and below the cube so every face is seen
    angles = np.linspace(0, 2 * math.pi, 6, endpoint=False)
    cams = [look_at((0.35 * math.cos(a), 0.35 * math.sin(a), 0.25 * (-1) ** k), [0, 0, 0], size=32) for k, a in enumerate(angles)]
    imgs = [render(red, c) for c in cams]
    fitted, _ = fit_appearance(imgs, cams, gray, FitConfig(iterations=200, lr=0.3))
    assert np.abs(fitted.colors - [1, 0, 0]).max() <= 0.05


def test_fit_rejects_mismatched_lists():
    ss, cam = box_scene(n=10, size=16)
    with pytest.raises(ValueError):
        fit_appearance([np.zeros((16, 16, 3))] * 3, [cam] * 2, ss)


def test_fit_reports_divergence():
    ss, _ = box_scene(n=10, size=16)
    cams = [look_at([0.3, 0.0, 0.2], [0, 0, 0], size=16)] * 3
    imgs = [np.full((16, 16, 3), np.nan)] * 3
    with pytest.raises(FloatingPointError, match="iteration 0"):
        fit_appearance(imgs, cams, ss)


def test_splat_json_roundtrip(tmp_path):
    ss, _ = box_scene(n=12)
    path = tmp_path / "s.json"
    ss.save(path)
    back = SplatSet.load(path)
    np.testing.assert_array_equal(back.centers, ss.centers)
    np.testing.assert_array_equal(back.colors, ss.colors)


def test_camera_json_roundtrip():
    cam = look_at([0.1, 0.2, 0.3], [0, 0, 0])
    back = Camera.from_json(cam.to_json())
    np.testing.assert_array_equal(back.extrinsic, cam.extrinsic)
    with pytest.raises(ValueError):
        Camera.from_json(dict(cam.to_json(), fx=-1))


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.random((5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(read_ppm(tmp_path / "a.ppm"), img)
    assert ppm_bytes(img).startswith(b"P6\n7 5\n255\n")
