"""Randomized scenes for gradient checks.

Contact-free scenes are pin-jointed pendulums (free flight alone would not
depend on any physical parameter).  Contact-active scenes slide, push or bounce
bodies on a floor over a short horizon, chosen so that no contact event falls
near the end of the window.
"""

from __future__ import annotations

import numpy as np

from pinwm.dynamics import assemble_lcp, lcp_backward, rollout, solve_lcp, action_twists
from pinwm.oracles import gradcheck
from pinwm.scene import PhysicsParams, scene_from_json
from pinwm.so3 import axis_angle_to_quat
from pinwm.sysid import ObservationSeq, trajectory_loss

FLOOR = {
    "name": "floor",
    "role": "static",
    "shape": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": 0.0},
    "friction": 0.3,
    "restitution": 0.0,
}


def _q(rng, scale):
    return [float(x) for x in axis_angle_to_quat(rng.normal(0, scale, 3))]


def _box(name, half, p, q=(1.0, 0.0, 0.0, 0.0), v=(0, 0, 0), w=(0, 0, 0)):
    return {
        "name": name,
        "role": "dynamic",
        "shape": {"type": "box", "half_extents": [float(x) for x in half]},
        "pose": {"p": [float(x) for x in p], "q": list(q)},
        "twist": {"v": [float(x) for x in v], "w": [float(x) for x in w]},
    }


def _param(rng, name, mass=None, restitution=0.0):
    return {
        "body": name,
        "mass": float(rng.uniform(0.3, 2.0) if mass is None else mass),
        "friction": float(rng.uniform(0.1, 0.5)),
        "restitution": float(restitution),
    }


def pendulum(rng):
    n = int(rng.integers(1, 3))
    bodies, params, joints = [], [], []
    top = np.array([0.0, 0.0, 1.0])
    for i in range(n):
        half = rng.uniform(0.02, 0.06, 3)
        arm = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), -rng.uniform(0.08, 0.15)])
        name = f"link{i}"
        bodies.append(_box(name, half, top + arm, _q(rng, 0.3), w=rng.normal(0, 1.0, 3)))
        params.append(_param(rng, name))
        joints.append({"body_a": name, "body_b": None if i == 0 else f"link{i - 1}", "anchor": top.tolist()})
        top = top + 2 * arm
    doc = {"bodies": bodies, "params": params, "joints": joints, "sim": {"H": 0.05, "h": 0.01}}
    return scene_from_json(doc), np.zeros((4, 3))


def slider(rng):
    half = rng.uniform(0.02, 0.05, 3)
    speed = rng.uniform(0.5, 1.0)
    ang = rng.uniform(0, 2 * np.pi)
    box = _box("box", half, [0, 0, half[2]], v=[speed * np.cos(ang), speed * np.sin(ang), 0])
    doc = {"bodies": [FLOOR, box], "params": [_param(rng, "box")], "sim": {"H": 0.04, "h": 0.01}}
    return scene_from_json(doc), np.zeros((3, 3))


def pushed(rng):
    half = np.array([rng.uniform(0.03, 0.06), rng.uniform(0.03, 0.06), rng.uniform(0.02, 0.04)])
    y = rng.uniform(-0.5, 0.5) * half[1]
    pusher = {
        "name": "pusher",
        "role": "kinematic",
        "shape": {"type": "sphere", "radius": 0.01},
        "pose": {"p": [-half[0] - 0.0105, float(y), float(half[2])]},
        "friction": 0.3,
    }
    box = _box("box", half, [0, 0, half[2]])
    doc = {"bodies": [FLOOR, box, pusher], "params": [_param(rng, "box")], "sim": {"H": 0.1, "h": 0.02}}
    d = rng.uniform(0.01, 0.02)
    return scene_from_json(doc), np.tile([d, 0.0, 0.0], (3, 1))


def bouncer(rng):
    r = rng.uniform(0.02, 0.04)
    ball = {
        "name": "ball",
        "role": "dynamic",
        "shape": {"type": "sphere", "radius": float(r)},
        "pose": {"p": [0.0, 0.0, float(r + rng.uniform(0.005, 0.015))]},
        "twist": {"v": [float(rng.uniform(-0.3, 0.3)), 0.0, float(-rng.uniform(0.5, 1.0))], "w": [0.0, 0.0, 0.0]},
    }
    p = _param(rng, "ball", restitution=rng.uniform(0.3, 0.8))
    doc = {"bodies": [FLOOR, ball], "params": [p], "sim": {"H": 0.01, "h": 0.002}}
    return scene_from_json(doc), np.zeros((4, 3))


CONTACT_FREE = (pendulum,)
CONTACT_ACTIVE = (slider, pushed, bouncer)


def random_scene(seed: int):
    """``(scene, actions, contact_active)`` for one seed; even seeds are contact-free."""
    rng = np.random.default_rng(seed)
    active = bool(seed % 2)
    family = CONTACT_ACTIVE if active else CONTACT_FREE
    scene, actions = family[int(rng.integers(len(family)))](rng)
    return scene, actions, active


def _flat(z):
    return np.concatenate([z[g].ravel() for g in PhysicsParams.GROUPS])


def _unflat(vec, like):
    out, k = {}, 0
    for g in PhysicsParams.GROUPS:
        n = like[g].size
        out[g] = vec[k : k + n].reshape(like[g].shape)
        k += n
    return out


def _names(like):
    return [g + "".join(f"[{i}]" for i in idx) for g in PhysicsParams.GROUPS for idx in np.ndindex(like[g].shape)]


def perturbed(scene, rng, scale=0.1):
    z0 = scene.params.encode()
    return {g: z0[g] + scale * rng.standard_normal(z0[g].shape) for g in PhysicsParams.GROUPS}


def check_trajectory_loss(scene, actions, seed, tol):
    """Gradcheck of the rollout loss in the unconstrained encoding."""
    rng = np.random.default_rng([seed, 1])
    body = scene.dynamic_indices[-1]
    obs = ObservationSeq.from_trajectory(rollout(scene, scene.initial_state(), actions), body)
    z = perturbed(scene, rng)
    _, grads, _ = trajectory_loss(scene, PhysicsParams.decode(z), obs)
    jac = PhysicsParams.decode_jacobian(z)
    analytic = _flat({g: grads[g] * jac[g] for g in grads})
    loss_fn = lambda v: trajectory_loss(scene, PhysicsParams.decode(_unflat(v, z)), obs, grad=False)[0]
    return gradcheck(loss_fn, analytic, _flat(z), _names(z), tol=tol)


def check_lcp_backward(scene, actions, seed, tol):
    """Gradcheck of one LCP solve: a random linear functional of the next twist
    against the parameters and the previous dynamic twists."""
    rng = np.random.default_rng([seed, 2])
    state = scene.initial_state()
    tw = action_twists(scene, actions[0], scene.sim.H)
    dyn = scene.dynamic_indices
    z = perturbed(scene, rng)
    params = PhysicsParams.decode(z)
    w = rng.standard_normal(6 * len(dyn))
    n_p = params.flat().size

    def solve(vec):
        s = state.copy()
        s[dyn, 7:13] = vec[n_p:].reshape(-1, 6)
        prob = assemble_lcp(scene, s, PhysicsParams.decode(_unflat(vec[:n_p], z)), scene.sim.h, tw)
        return prob, solve_lcp(prob)

    x0 = np.concatenate([_flat(z), state[dyn, 7:13].ravel()])
    prob, sol = solve(x0)
    g = lcp_backward(prob, sol, w, params, scene)
    jac = _flat(PhysicsParams.decode_jacobian(z))
    raw = np.concatenate([g.d_mass, g.d_inertia.ravel(), g.d_restitution, g.d_friction])
    analytic = np.concatenate([raw * jac, g.d_xi_prev])
    names = _names(z) + [f"xi_prev[{i}]" for i in range(6 * len(dyn))]
    return gradcheck(lambda v: float(w @ solve(v)[1].xi_next), analytic, x0, names, tol=tol)
