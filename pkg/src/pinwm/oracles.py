"""Reference values for checking the simulator: central finite differences and
closed-form contact mechanics.

The closed forms use plain arithmetic only and never call into the solver; the
``measure_*`` helpers run the simulator on the matching scenario so the two
can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

REL_FLOOR = 1e-12


def finite_diff(loss_fn: Callable[[np.ndarray], float], theta, eps_rel: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step ``eps_rel * max(|θ_i|, 1)``."""
    theta = np.array(theta, dtype=float).reshape(-1)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        step = eps_rel * max(abs(theta[i]), 1.0)
        hi, lo = theta.copy(), theta.copy()
        hi[i] += step
        lo[i] -= step
        f_hi, f_lo = float(loss_fn(hi)), float(loss_fn(lo))
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise FloatingPointError(f"non-finite loss while differencing coordinate {i}")
        g[i] = (f_hi - f_lo) / (2 * step)
    return g


def relative_error(a, b, floor: float = REL_FLOOR) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float
    atol: np.ndarray  # per-coordinate noise floor
    passed_each: np.ndarray = field(repr=False)

    @property
    def max_rel_err(self) -> float:
        """Largest relative error among coordinates above the noise floor."""
        judged = np.maximum(np.abs(self.analytic), np.abs(self.numeric)) > self.atol
        return float(self.rel_err[judged].max()) if judged.any() else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.passed_each.all())

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "tol": self.tol,
            "entries": [
                {"name": n, "analytic": float(a), "fd": float(b), "rel_err": float(r), "noise_floor": float(f), "ok": bool(ok)}
                for n, a, b, r, f, ok in zip(self.names, self.analytic, self.numeric, self.rel_err, self.atol, self.passed_each)
            ],
        }

    def table(self) -> str:
        lines = [f"{'parameter':<16}{'analytic':>16}{'fd':>16}{'rel err':>12}  ok"]
        for e in self.to_json()["entries"]:
            lines.append(f"{e['name']:<16}{e['analytic']:>16.8e}{e['fd']:>16.8e}{e['rel_err']:>12.3e}  {'yes' if e['ok'] else 'NO'}")
        lines.append(f"max rel err {self.max_rel_err:.3e} (tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def fd_steps(theta, eps_rel: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    return eps_rel * np.maximum(np.abs(theta), 1.0)


def gradcheck(
    loss_fn: Callable[[np.ndarray], float],
    grad: np.ndarray,
    theta,
    names: Sequence[str] | None = None,
    eps_rel: float = 1e-5,
    tol: float = 1e-3,
    noise: float = 1e-7,
    loss_noise: float = 1e-10,
) -> GradCheckReport:
    """Compare an analytic gradient with central differences of ``loss_fn``.

    A coordinate passes when its relative error is within ``tol`` or when the
    two values differ by no more than the differencing noise floor
    ``noise * max|fd| + loss_noise / (2 * step_i)``: the first term covers
    components far below the largest one, the second the iterative solver's
    reproducibility of the loss itself.
    """
    grad = np.asarray(grad, dtype=float).reshape(-1)
    fd = finite_diff(loss_fn, theta, eps_rel)
    rel = relative_error(grad, fd)
    atol = noise * float(np.abs(fd).max(initial=0.0)) + loss_noise / (2 * fd_steps(theta, eps_rel))
    ok = (rel <= tol) | (np.abs(grad - fd) <= atol)
    names = list(names) if names is not None else [f"theta[{i}]" for i in range(len(grad))]
    return GradCheckReport(names, grad, fd, rel, tol, atol, ok)


# closed-form mechanics ----------------------------------------------------------


def coulomb_sliding_solution(v0: float, mu: float, g: float = 9.81) -> tuple[float, float]:
    """Stopping time and distance of a block sliding on a level floor."""
    if v0 < 0:
        raise ValueError("v0 must be non-negative")
    if mu <= 0 or g <= 0:
        raise ValueError("mu and g must be positive")
    decel = mu * g
    return v0 / decel, v0 * v0 / (2 * decel)


def bounce_sequence(h0: float, k: float, g: float = 9.81, n_bounces: int = 3) -> list[float]:
    """Apex heights after each bounce: ``h0 * k**(2 i)`` for ``i = 1..n``.

    ``g`` does not enter the apex heights; it is accepted for symmetry with
    the other oracles.
    """
    if h0 <= 0:
        raise ValueError("h0 must be positive")
    if not 0 < k <= 1:
        raise ValueError("k must lie in (0, 1]")
    return [h0 * k ** (2 * i) for i in range(1, n_bounces + 1)]


# simulated counterparts -------------------------------------------------------------


def _scene(dynamic: dict, param: dict, floor_friction: float, sim: dict):
    from .scene import scene_from_json

    return scene_from_json(
        {
            "format": "pinwm-scene/1",
            "bodies": [
                {"name": "floor", "role": "static", "shape": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": 0.0}, "friction": floor_friction, "restitution": 0.0},
                dynamic,
            ],
            "params": [param],
            "sim": sim,
        }
    )


def measure_sliding_distance(v0: float, mu: float, h: float = 1e-3, g: float = 9.81, half=(0.05, 0.05, 0.025)) -> float:
    """Distance a simulated box travels after being launched at ``v0``.

    Floor and box share the friction coefficient so the combined value is ``mu``.
    """
    from .dynamics import step

    box = {
        "name": "block",
        "role": "dynamic",
        "shape": {"type": "box", "half_extents": list(half)},
        "pose": {"p": [0.0, 0.0, half[2]], "q": [1.0, 0.0, 0.0, 0.0]},
        "twist": {"v": [v0, 0.0, 0.0], "w": [0.0, 0.0, 0.0]},
    }
    sc = _scene(box, {"body": "block", "mass": 1.0, "friction": mu, "restitution": 0.0}, mu, {"H": h, "h": h, "gravity": [0.0, 0.0, -g]})
    s = sc.initial_state()
    t_stop = coulomb_sliding_solution(v0, mu, g)[0] if v0 > 0 else 0.0
    for _ in range(int(1.5 * t_stop / h) + 10):
        s = step(sc, s, None, sc.params)
        if abs(s[1, 7]) < 1e-9:
            break
    return float(s[1, 0])


def measure_bounce_apexes(h0: float, k: float, h: float = 1e-4, n_bounces: int = 3, g: float = 9.81, radius: float = 0.03) -> list[float]:
    """Apex heights (gap below the ball) after each simulated bounce.

    Runs with zero contact margin: a margin lets the restitution target act
    before the ball touches, which shortens the drop by up to the margin.
    """
    from .dynamics import step

    ball = {
        "name": "ball",
        "role": "dynamic",
        "shape": {"type": "sphere", "radius": radius},
        "pose": {"p": [0.0, 0.0, radius + h0], "q": [1.0, 0.0, 0.0, 0.0]},
    }
    sc = _scene(ball, {"body": "ball", "mass": 0.1, "friction": 0.2, "restitution": k}, 0.2, {"H": h, "h": h, "gravity": [0.0, 0.0, -g], "margin": 0.0})
    s = sc.initial_state()
    fall = math.sqrt(2 * h0 / g)
    t_end = fall * (1 + 2 * sum(k**i for i in range(1, n_bounces + 1))) * 1.05
    apexes, prev_vz = [], 0.0
    bounced = False
    for _ in range(int(t_end / h) + 1):
        s = step(sc, s, None, sc.params)
        vz = s[1, 9]
        if vz > 0:
            bounced = True
        if bounced and prev_vz > 0 >= vz:
            apexes.append(float(s[1, 2] - radius))
            if len(apexes) == n_bounces:
                break
        prev_vz = vz
    return apexes
