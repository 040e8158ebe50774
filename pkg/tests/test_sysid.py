import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pinwm.cli import _data
from pinwm.dynamics import rollout
from pinwm.scene import load_scene
from pinwm.so3 import axis_angle_to_quat, quat_angle, quat_normalize
from pinwm.sysid import (
    IMAGE,
    IdentConfig,
    ObservationSeq,
    _angle_sq,
    identify,
    one_step_error,
    pose_loss,
    push_sampler,
    trajectory_loss,
)

quat = arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.2).map(quat_normalize)


@pytest.fixture(scope="module")
def push():
    sc = load_scene(_data("push.json"))
    acts = np.tile([0.01, 0.0, 0.0], (6, 1))
    return sc, ObservationSeq.from_trajectory(rollout(sc, sc.initial_state(), acts), 1)


@given(quat, quat)
def test_angle_term_matches_geodesic(a, b):
    val, _ = _angle_sq(a, b)
    assert val == pytest.approx(quat_angle(a, b) ** 2, abs=1e-9)


@settings(max_examples=50)
@given(quat, st.floats(1e-5, 1.0), st.integers(0, 2**31))
def test_angle_term_gradient(q, ang, seed):
    # directional derivatives on the unit sphere, both sides of the series cutoff
    qb = quat_normalize(axis_angle_to_quat([ang, 0.3 * ang, 0.0]))
    # the angle has a kink where q and -q are equally far (a half turn)
    assume(abs(q @ qb) > 1e-3)
    _, g = _angle_sq(q, qb)
    d = np.random.default_rng(seed).standard_normal(4)
    d -= (d @ q) * q
    d /= np.linalg.norm(d)
    eps = 1e-6
    f = lambda t: _angle_sq(quat_normalize(q + t * d), qb)[0]
    fd = (f(eps) - f(-eps)) / (2 * eps)
    assert g @ d == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_pose_loss_zero_at_match_and_sign_invariant():
    q = quat_normalize([0.3, 0.1, -0.5, 0.2])
    assert pose_loss([1, 2, 3], q, [1, 2, 3], q)[0] == 0.0
    assert pose_loss([1, 2, 3], q, [1, 2, 3], -q)[0] == 0.0
    assert pose_loss([0, 0, 0], q, [0, 0, 0.1], q)[0] == pytest.approx(0.01)


def test_loss_at_generating_params(push):
    sc, obs = push
    loss, grads, _ = trajectory_loss(sc, sc.params, obs)
    assert loss <= 1e-10


def test_zero_actions_zero_loss(push):
    sc, _ = push
    obs = ObservationSeq.from_trajectory(rollout(sc, sc.initial_state(), []), 1)
    loss, grads, _ = trajectory_loss(sc, sc.params.with_group("friction", [0.1]), obs)
    assert loss == 0.0
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_observation_validation(push):
    sc, obs = push
    bad = ObservationSeq(obs.mode, obs.actions, obs.H, obs.h, obs.body, poses=obs.poses[:-1])
    with pytest.raises(ValueError, match="observed poses"):
        bad.validate()
    with pytest.raises(ValueError):
        ObservationSeq("video", obs.actions, obs.H, obs.h, obs.body, poses=obs.poses).validate()
    with pytest.raises(ValueError, match="camera"):
        ObservationSeq(IMAGE, obs.actions, obs.H, obs.h, obs.body, images=[np.zeros((4, 4, 3))] * 6).validate()


def test_ident_config_validation():
    with pytest.raises(ValueError):
        IdentConfig(free=()).validate()
    with pytest.raises(ValueError, match="unknown"):
        IdentConfig(free=("viscosity",)).validate()


def test_identify_moves_toward_truth_and_freezes_others(push):
    sc, obs = push
    init = sc.params.with_group("friction", [0.06]).with_group("mass", [0.8])
    res = identify(sc, init, obs, cfg=IdentConfig(free=("friction",), max_iter=40))
    assert abs(res.theta_star.friction[0] - 0.03) < abs(0.06 - 0.03)
    assert res.theta_star.mass[0] == 0.8
    assert min(res.loss_history) < res.loss_history[0]
    assert len(res.trace["friction"]) == res.iterations
    doc = res.to_json(["box"], timing=False)
    assert "wall_time" not in doc and doc["iterations"] == res.iterations


def test_identify_is_deterministic(push):
    sc, obs = push
    init = sc.params.with_group("friction", [0.05])
    a = identify(sc, init, obs, cfg=IdentConfig(max_iter=5))
    b = identify(sc, init, obs, cfg=IdentConfig(max_iter=5))
    assert a.loss_history == b.loss_history


def test_one_step_error_self_is_zero():
    sc = load_scene(_data("push.json"))
    t, r, arr = one_step_error(sc.params, sc.params, sc, push_sampler(sc, 1), k=5)
    assert (t, r) == (0.0, 0.0)
    assert arr.shape == (5, 2)


def test_one_step_error_detects_difference():
    sc = load_scene(_data("push.json"))
    other = sc.params.with_group("friction", [0.3])
    t, _, _ = one_step_error(sc.params, other, sc, push_sampler(sc, 1), k=5)
    assert t > 1e-4


def test_push_sampler_places_tool_outside_box():
    sc = load_scene(_data("push.json"))
    sample = push_sampler(sc, 1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s, a = sample(rng)
        rel = s[2, 0:2] - s[1, 0:2]
        # tool sphere (radius 0.01) keeps the 2 mm gap to the box (half width 0.05)
        outside = np.maximum(np.abs(rel) - 0.05, 0.0)
        assert np.linalg.norm(outside) >= 0.01 + 0.002 - 1e-12
        # the push points back toward the box
        assert rel @ a[:2] < 0
