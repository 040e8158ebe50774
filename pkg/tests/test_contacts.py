import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FLOOR, cube_on_floor, make_scene
from pinwm.contacts import build_jacobians, closest_feature, detect_contacts, tangent_basis
from pinwm.scene import ConvexPolytope
from pinwm.so3 import axis_angle_to_quat


def sphere_scene(z, r=0.05, others=()):
    ball = {"name": "ball", "role": "dynamic", "shape": {"type": "sphere", "radius": r}, "pose": {"p": [0, 0, z]}}
    params = [{"body": "ball", "mass": 1.0, "friction": 0.5, "restitution": 0.0}]
    return make_scene([FLOOR, ball, *others], params)


def test_resting_cube_four_contacts():
    sc = cube_on_floor()
    cs = detect_contacts(sc, sc.initial_state(), margin=1e-3)
    assert len(cs) == 4
    np.testing.assert_allclose(cs.normals, np.tile([0, 0, 1.0], (4, 1)))
    np.testing.assert_allclose(cs.depths, 0.0, atol=1e-15)


def test_hovering_cube_no_contacts():
    sc = cube_on_floor(z=1.5)
    assert len(detect_contacts(sc, sc.initial_state(), margin=1e-3)) == 0


def test_sphere_floor_penetration():
    sc = sphere_scene(0.04)
    cs = detect_contacts(sc, sc.initial_state(), margin=1e-3)
    assert len(cs) == 1
    assert cs.depths[0] == pytest.approx(0.01)
    np.testing.assert_allclose(cs.points[0], [0, 0, -0.01], atol=1e-15)


def test_single_contact_rows():
    sc = sphere_scene(0.05)
    s = sc.initial_state()
    s[1, 0:3] = [0, 0, 0.05]
    cs = detect_contacts(sc, s, margin=1e-3)
    # put the body origin on the contact point so the lever arm vanishes
    s[1, 0:3] = cs.points[0]
    jac = build_jacobians(sc, cs, s)
    np.testing.assert_allclose(jac.J_c[0, 6:12], [0, 0, 1, 0, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(jac.E, np.ones((4, 1)))


def test_selector_block_structure():
    sc = cube_on_floor()
    cs = detect_contacts(sc, sc.initial_state(), margin=1e-3)
    jac = build_jacobians(sc, cs, sc.initial_state())
    E = jac.E
    assert E.shape == (16, 4)
    np.testing.assert_array_equal(E, np.kron(np.eye(4), np.ones((4, 1))))


def test_sphere_sphere_and_sphere_box():
    pusher = {"name": "p", "role": "kinematic", "shape": {"type": "sphere", "radius": 0.02}, "pose": {"p": [0.065, 0, 0.05]}}
    sc = sphere_scene(0.05, others=[pusher])
    cs = detect_contacts(sc, sc.initial_state(), margin=1e-3)
    assert len(cs) == 2
    mask = (cs.body_a != 0) & (cs.body_b != 0)
    assert cs.depths[mask][0] == pytest.approx(0.005)


@settings(max_examples=40)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.5, 2.0))
def test_normal_row_gives_relative_velocity(ax, ay, az, lift):
    # J_c ξ equals the normal velocity of the contact point for any rigid twist
    sc = cube_on_floor()
    s = sc.initial_state()
    s[1, 3:7] = axis_angle_to_quat([ax, ay, az])
    low = detect_contacts(sc, s, margin=10.0)
    assert len(low)
    rng = np.random.default_rng(int(1e6 * lift))
    tw = rng.standard_normal(6)
    jac = build_jacobians(sc, low, s)
    r = low.points - s[1, 0:3]
    point_vel = tw[:3] + np.cross(tw[3:], r)
    np.testing.assert_allclose(jac.J_c[:, 6:12] @ tw, (point_vel * low.normals).sum(1), atol=1e-12)


@given(st.integers(2, 8).map(lambda k: 2 * k))
def test_tangent_basis_orthogonal(n_d):
    rng = np.random.default_rng(n_d)
    n = rng.standard_normal((5, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    T = tangent_basis(n, n_d)
    assert T.shape == (5, n_d, 3)
    np.testing.assert_allclose(np.einsum("cdk,ck->cd", T, n), 0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(T, axis=2), 1, atol=1e-12)
    # opposing pairs keep the pyramid symmetric
    np.testing.assert_allclose(T.sum(axis=1), 0, atol=1e-12)


def test_closest_feature_kinds():
    box = ConvexPolytope.box([1, 1, 1])
    assert closest_feature(box, np.array([0.0, 0.0, 3.0]))[0] == "face"
    assert closest_feature(box, np.array([3.0, 3.0, 0.0]))[0] == "edge"
    assert closest_feature(box, np.array([3.0, 3.0, 3.0]))[0] == "vertex"
