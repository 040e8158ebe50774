"""Digital cousins: bounded uniform perturbations of identified parameters and
splat colours, plus a small reset/step environment over them."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dynamics import rollout
from .scene import PhysicsParams, Scene
from .so3 import quat_mul

COUSIN_FORMAT = "pinwm-cousins/1"
PHYSICS, SPLAT_COLOR = "physics", "splat_color"
# restitution at or below this is treated as zero and gets the additive interval
ZERO_RESTITUTION = 1e-9
RESTITUTION_FLOOR = 0.05


@dataclass(frozen=True)
class CousinConfig:
    delta: float = 0.1
    seed: int = 0
    groups: tuple[str, ...] = (PHYSICS, SPLAT_COLOR)

    def validate(self) -> None:
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        bad = set(self.groups) - {PHYSICS, SPLAT_COLOR}
        if bad:
            raise ValueError(f"unknown cousin groups {sorted(bad)}")


@dataclass
class Cousin:
    params: PhysicsParams
    splats: object | None
    cousin_id: int
    seed: int


def perturbation_bounds(x: np.ndarray, delta: float, restitution: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Sampling interval per scalar (before any clamping)."""
    x = np.asarray(x, dtype=float)
    lo, hi = x * (1 - delta), x * (1 + delta)
    if restitution:
        zero = x <= ZERO_RESTITUTION
        lo = np.where(zero, 0.0, lo)
        hi = np.where(zero, delta * RESTITUTION_FLOOR, np.minimum(hi, 1.0))
    return lo, hi


def _draw(rng: np.random.Generator, x, delta, restitution=False):
    lo, hi = perturbation_bounds(x, delta, restitution)
    return rng.uniform(lo, hi) if delta > 0 else np.array(x, dtype=float, copy=True)


def sample_cousin(theta: PhysicsParams, splats, cfg: CousinConfig, draw_index: int) -> Cousin:
    """Draw cousin ``draw_index``; identical inputs always give the same cousin."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, draw_index])
    params = theta.copy()
    if PHYSICS in cfg.groups:
        params = PhysicsParams(
            _draw(rng, theta.mass, cfg.delta),
            _draw(rng, theta.inertia, cfg.delta),
            _draw(rng, theta.restitution, cfg.delta, restitution=True),
            _draw(rng, theta.friction, cfg.delta),
        )
    out_splats = splats
    if splats is not None and SPLAT_COLOR in cfg.groups:
        out_splats = replace(splats, colors=np.clip(_draw(rng, splats.colors, cfg.delta), 0.0, 1.0))
    return Cousin(params, out_splats, draw_index, cfg.seed)


def manifest(cousins: Sequence[Cousin], scene: Scene, cfg: CousinConfig) -> dict:
    names = [scene.bodies[i].name for i in scene.dynamic_indices]
    return {
        "format": COUSIN_FORMAT,
        "delta": cfg.delta,
        "seed": cfg.seed,
        "groups": list(cfg.groups),
        "count": len(cousins),
        "cousins": [{"cousin_id": c.cousin_id, "seed": c.seed, "params": c.params.to_json(names)} for c in cousins],
    }


class CousinEnv:
    """Episode facade: each reset places the target body at a random pose in a
    square region (and optionally draws a fresh cousin); each step applies one
    end-effector action under that cousin's physics.

    Observations are rendered images when a camera and splats are available,
    otherwise the ``(n_bodies, 7)`` poses.
    """

    def __init__(
        self,
        scene: Scene,
        theta: PhysicsParams,
        cfg: CousinConfig,
        splats=None,
        camera=None,
        body: int | None = None,
        region: float = 0.05,
        yaw_range: float = math.pi,
        horizon: int = 20,
        resample: bool = True,
    ):
        cfg.validate()
        self.scene, self.theta, self.cfg = scene, theta, cfg
        self.splats, self.camera = splats, camera
        self.body = scene.dynamic_indices[0] if body is None else body
        self.region, self.yaw_range, self.horizon, self.resample = region, yaw_range, horizon, resample
        self._episode = -1
        self._draws = 0
        self.cousin: Cousin | None = None
        self.state: np.ndarray | None = None
        self.t = 0

    def _observe(self) -> np.ndarray:
        if self.camera is not None and self.cousin.splats is not None:
            from .splats import render_at_pose

            row = self.state[self.body]
            return render_at_pose(self.cousin.splats, self.camera, row[0:3], row[3:7])
        return self.state[:, 0:7].copy()

    def reset(self) -> np.ndarray:
        self._episode += 1
        if self.cousin is None or self.resample:
            self.cousin = sample_cousin(self.theta, self.splats, self.cfg, self._draws)
            self._draws += 1
        rng = np.random.default_rng([self.cfg.seed, 1_000_003, self._episode])
        s = self.scene.initial_state()
        dx, dy = rng.uniform(-self.region, self.region, size=2)
        yaw = rng.uniform(-self.yaw_range, self.yaw_range)
        s[self.body, 0] += dx
        s[self.body, 1] += dy
        s[self.body, 3:7] = quat_mul([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)], s[self.body, 3:7])
        self.state, self.t = s, 0
        return self._observe()

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        traj = rollout(self.scene, self.state, [np.asarray(action, dtype=float)], self.cousin.params)
        self.state = traj.states[-1]
        self.t += 1
        return self._observe(), self.t >= self.horizon
