"""Physical parameter identification by backpropagation through rollouts.

The loss compares a simulated trajectory of one target body with observations,
either its poses or rendered images.  Gradients flow through every substep via
:func:`pinwm.dynamics.backward_through_time` and are mapped onto the
unconstrained encoding of :class:`PhysicsParams`, where Adam does the updates.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import Trajectory, backward_through_time, rollout
from .lcp import LcpError
from .scene import PhysicsParams, Scene, SceneError
from .so3 import quat_angle

POSE, IMAGE = "pose", "image"
# below this value of 1 - |q_a·q_b| the squared angle uses its series
_SERIES_CUTOFF = 1e-6


class IdentError(RuntimeError):
    """Identification diverged (non-finite loss or gradient)."""


@dataclass
class ObservationSeq:
    """Observed behaviour of ``body`` under ``actions``.

    ``poses`` has one ``(7,)`` row ``[p, q]`` per action boundary after the
    initial state (length ``len(actions)``).  In image mode ``images`` holds one
    ``(H, W, 3)`` array per boundary, all seen by ``camera``.
    """

    mode: str
    actions: np.ndarray
    H: float
    h: float
    body: int
    poses: np.ndarray | None = None
    images: list | None = None
    camera: object | None = None
    state0: np.ndarray | None = None

    def validate(self) -> None:
        if self.mode not in (POSE, IMAGE):
            raise ValueError(f"observation mode must be {POSE!r} or {IMAGE!r}")
        n = len(self.actions)
        if self.mode == POSE:
            if self.poses is None or self.images is not None:
                raise ValueError("pose observations need poses and no images")
            if len(self.poses) != n:
                raise ValueError(f"expected {n} observed poses, got {len(self.poses)}")
        else:
            if self.images is None or self.poses is not None:
                raise ValueError("image observations need images and no poses")
            if self.camera is None:
                raise ValueError("image observations need a camera")
            if len(self.images) != n:
                raise ValueError(f"expected {n} observed images, got {len(self.images)}")
            w, hgt = self.camera.width, self.camera.height
            for i, im in enumerate(self.images):
                if np.shape(im) != (hgt, w, 3):
                    raise ValueError(f"image {i} has shape {np.shape(im)}, camera expects {(hgt, w, 3)}")

    @classmethod
    def from_trajectory(cls, traj: Trajectory, body: int) -> "ObservationSeq":
        S = np.stack(traj.states[1:]) if len(traj.states) > 1 else np.zeros((0,) + traj.states[0].shape)
        return cls(
            POSE,
            np.array(traj.actions, dtype=float).reshape(-1, 3),
            traj.H,
            traj.h,
            body,
            poses=S[:, body, 0:7].copy(),
            state0=traj.states[0].copy(),
        )


def _angle_sq(qa, qb):
    """Squared geodesic angle and its derivative with respect to ``qa``."""
    d = float(np.dot(qa, qb))
    c = min(abs(d), 1.0)
    sgn = 1.0 if d >= 0 else -1.0
    r = 1.0 - c
    if r < _SERIES_CUTOFF:
        # 4·arccos(c)² = 8r + 4r²/3 + O(r³)
        val = 8.0 * r + 4.0 * r * r / 3.0
        dval_dc = -8.0 - 8.0 * r / 3.0
    else:
        a = math.acos(c)
        val = 4.0 * a * a
        dval_dc = -8.0 * a / math.sqrt(1.0 - c * c)
    return val, dval_dc * sgn * np.asarray(qb, dtype=float)


def pose_loss(p, q, p_obs, q_obs):
    """Squared position error plus squared geodesic angle; returns ``(loss, p_bar, q_bar)``."""
    dp = np.asarray(p) - np.asarray(p_obs)
    ang, q_bar = _angle_sq(q, q_obs)
    return float(dp @ dp) + ang, 2.0 * dp, q_bar


def trajectory_loss(scene: Scene, params: PhysicsParams, obs: ObservationSeq, splats=None, grad: bool = True):
    """Rollout loss against ``obs`` and (optionally) its gradient per parameter group.

    Returns ``(loss, grads, traj)``; ``grads`` is ``None`` when ``grad`` is false.
    """
    obs.validate()
    if obs.mode == IMAGE and splats is None:
        raise ValueError("image-space loss needs a splat set")
    sc = scene if (obs.H, obs.h) == (scene.sim.H, scene.sim.h) else scene.with_sim(H=obs.H, h=obs.h)
    s0 = sc.initial_state() if obs.state0 is None else obs.state0
    traj = rollout(sc, s0, obs.actions, params, record_tape=grad)
    loss = 0.0
    bars: list = [None]
    for t in range(1, len(traj.states)):
        row = traj.states[t][obs.body]
        if obs.mode == POSE:
            l, p_bar, q_bar = pose_loss(row[0:3], row[3:7], obs.poses[t - 1, 0:3], obs.poses[t - 1, 3:7])
        else:
            from .splats import pose_render_loss

            l, p_bar, q_bar = pose_render_loss(splats, obs.camera, row[0:3], row[3:7], obs.images[t - 1])
        loss += l
        if grad:
            bar = np.zeros_like(traj.states[t])
            bar[obs.body, 0:3] = p_bar
            bar[obs.body, 3:7] = q_bar
            bars.append(bar)
    if not math.isfinite(loss):
        raise IdentError("loss is not finite")
    if not grad:
        return loss, None, traj
    grads, _ = backward_through_time(sc, traj, params, bars)
    return loss, grads, traj


@dataclass
class IdentConfig:
    free: tuple[str, ...] = ("friction",)
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_iter: int = 500
    tol: float = 1e-10
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if not self.free:
            raise ValueError("at least one parameter group must be free")
        bad = [g for g in self.free if g not in PhysicsParams.GROUPS]
        if bad:
            raise ValueError(f"unknown parameter groups {bad}; choose from {PhysicsParams.GROUPS}")
        if self.lr <= 0 or self.max_iter < 1 or self.patience < 1:
            raise ValueError("lr must be positive; max_iter and patience at least 1")


@dataclass
class IdentResult:
    theta_star: PhysicsParams
    theta_init: PhysicsParams
    loss_history: list[float]
    iterations: int
    converged: bool
    trace: dict[str, list] = field(default_factory=dict)
    wall_time: float = 0.0
    config: IdentConfig | None = None

    def to_json(self, body_names: Sequence[str], timing: bool = True) -> dict:
        """JSON report; ``timing=False`` leaves out the wall time so that
        repeated runs serialize identically."""
        doc = {
            "format": "pinwm-ident/1",
            "initial": self.theta_init.to_json(body_names),
            "final": self.theta_star.to_json(body_names),
            "loss_history": [float(x) for x in self.loss_history],
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": {k: [np.asarray(v).tolist() for v in vals] for k, vals in self.trace.items()},
            "config": None if self.config is None else asdict(self.config),
        }
        if timing:
            doc["wall_time"] = self.wall_time
        return doc


def identify(
    scene: Scene,
    theta_init: PhysicsParams,
    obs: ObservationSeq,
    splats=None,
    cfg: IdentConfig | None = None,
    callback: Callable[[int, float, PhysicsParams], None] | None = None,
) -> IdentResult:
    """Adam on the encoded parameters of the free groups.

    Stops after ``max_iter`` iterations or once the loss changed by less than
    ``tol`` for ``patience`` consecutive iterations.  Returns the parameters
    with the lowest loss seen.
    """
    cfg = cfg or IdentConfig()
    cfg.validate()
    theta_init.validate()
    t_start = time.perf_counter()
    z = theta_init.encode()
    m = {g: np.zeros_like(z[g]) for g in cfg.free}
    v = {g: np.zeros_like(z[g]) for g in cfg.free}
    b1, b2 = cfg.betas
    history: list[float] = []
    trace: dict[str, list] = {g: [] for g in cfg.free}
    best_loss, best = math.inf, theta_init.copy()
    quiet, converged, it = 0, False, 0
    for it in range(1, cfg.max_iter + 1):
        theta = PhysicsParams.decode(z)
        # frozen groups keep their exact initial values
        for g in PhysicsParams.GROUPS:
            if g not in cfg.free:
                theta = theta.with_group(g, theta_init.group(g))
        try:
            loss, grads, _ = trajectory_loss(scene, theta, obs, splats)
        except (LcpError, FloatingPointError) as exc:
            raise IdentError(f"solver failed at iteration {it}: {exc}") from exc
        if not all(np.isfinite(grads[g]).all() for g in cfg.free):
            raise IdentError(f"non-finite gradient at iteration {it}")
        if history and abs(loss - history[-1]) < cfg.tol:
            quiet += 1
        else:
            quiet = 0
        history.append(loss)
        for g in cfg.free:
            trace[g].append(theta.group(g).copy())
        if loss < best_loss:
            best_loss, best = loss, theta.copy()
        if callback is not None:
            callback(it, loss, theta)
        if quiet >= cfg.patience:
            converged = True
            break
        jac = PhysicsParams.decode_jacobian(z)
        for g in cfg.free:
            gz = grads[g] * jac[g]
            m[g] = b1 * m[g] + (1 - b1) * gz
            v[g] = b2 * v[g] + (1 - b2) * gz * gz
            mh = m[g] / (1 - b1**it)
            vh = v[g] / (1 - b2**it)
            z[g] = z[g] - cfg.lr * mh / (np.sqrt(vh) + cfg.eps)
    return IdentResult(best, theta_init.copy(), history, it, converged, trace, time.perf_counter() - t_start, cfg)


# one-step error ------------------------------------------------------------


def push_sampler(scene: Scene, body: int, reach=(0.01, 0.03), gap: float = 0.002):
    """Sampler of ``(state, action)`` pairs: the end-effector is placed just
    outside ``body`` on a random horizontal bearing and pushes toward its centre."""
    from .scene import ConvexPolytope, Sphere

    ee = scene.end_effector
    if ee is None:
        raise SceneError("push sampling needs a kinematic end-effector")
    base = scene.initial_state()
    shape = scene.bodies[body].shape
    tool = scene.bodies[ee].shape
    tool_r = tool.radius if isinstance(tool, Sphere) else float(np.abs(tool.vertex_array).max())

    def sample(rng: np.random.Generator):
        phi = rng.uniform(0, 2 * math.pi)
        u = np.array([math.cos(phi), math.sin(phi), 0.0])
        if isinstance(shape, Sphere):
            dist = shape.radius + tool_r + gap
        elif isinstance(shape, ConvexPolytope):
            # exit point of the bounding box grown by the clearance, so the tool
            # keeps it on every bearing, corners included
            ext = np.abs(shape.vertex_array).max(axis=0) + tool_r + gap
            with np.errstate(divide="ignore"):
                dist = float(np.min(np.where(np.abs(u[:2]) > 1e-12, ext[:2] / np.abs(u[:2]), np.inf)))
        else:
            raise SceneError("push sampling needs a sphere or polytope target")
        s = base.copy()
        s[ee, 0:2] = s[body, 0:2] + dist * u[:2]
        action = -rng.uniform(*reach) * u
        return s, action

    return sample


def one_step_gap(theta_a: PhysicsParams, theta_b: PhysicsParams, scene: Scene, state, action, body: int) -> tuple[float, float]:
    """Translation and rotation gap of ``body`` after one action under each model."""
    fa = rollout(scene, state, [action], theta_a).states[-1][body]
    fb = rollout(scene, state, [action], theta_b).states[-1][body]
    return float(np.linalg.norm(fa[0:3] - fb[0:3])), float(quat_angle(fa[3:7], fb[3:7]))


def one_step_error(theta_a: PhysicsParams, theta_b: PhysicsParams, scene: Scene, sampler, k: int = 100, seed: int = 0, body: int | None = None):
    """Mean translation (m) and rotation (rad) gap between the two models after
    one action, over ``k`` sampled ``(state, action)`` pairs.  Also returns the
    per-sample ``(k, 2)`` array."""
    if k < 1:
        raise ValueError("k must be at least 1")
    body = scene.dynamic_indices[0] if body is None else body
    rng = np.random.default_rng(seed)
    arr = np.array([one_step_gap(theta_a, theta_b, scene, *sampler(rng), body) for _ in range(k)])
    return float(arr[:, 0].mean()), float(arr[:, 1].mean()), arr
