"""Velocity-level rigid-body stepping: LCP assembly, solve, integration, rollouts
and the reverse-mode pass through all of it.

States are ``(n_bodies, 13)`` arrays with rows ``[p(3), q(4), v(3), w(3)]``;
twists are stacked as ``[v, w]`` per body.  A rollout with ``record_tape``
keeps one :class:`Substep` per simulation step, and
:func:`backward_through_time` walks that tape in reverse, chaining the
implicit-function adjoint of each LCP with the derivatives of contact
geometry, mass matrix, restitution targets and pose integration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .contacts import (
    ContactSet,
    Jacobians,
    build_jacobians,
    contact_vjp,
    detect_contacts,
    jacobian_vjp,
    joint_rows_vjp,
)
from .lcp import MlcpSolution, SolverConfig, mlcp_adjoint, solve_mlcp
from .scene import PhysicsParams, Scene
from .so3 import integrate_pose, integrate_pose_vjp, quat_to_matrix, quat_to_matrix_vjp

TRAJ_FORMAT = "pinwm-traj/1"


@dataclass
class LcpProblem:
    """Assembled KKT data for one substep (unknowns: twists of dynamic bodies)."""

    M: np.ndarray
    b: np.ndarray
    J_e: np.ndarray
    e_off: np.ndarray
    J_c: np.ndarray
    J_f: np.ndarray
    E: np.ndarray
    c_vec: np.ndarray
    off_c: np.ndarray
    off_f: np.ndarray
    mu: np.ndarray
    restitution: np.ndarray
    contacts: ContactSet
    xi_prev: np.ndarray
    # values kept for the backward pass
    compliance: float = 0.0
    h: float = field(default=0.0, repr=False)
    jac: Jacobians | None = field(default=None, repr=False)
    rotations: np.ndarray | None = field(default=None, repr=False)
    inertia: np.ndarray | None = field(default=None, repr=False)
    now: np.ndarray | None = field(default=None, repr=False)
    nxt: np.ndarray | None = field(default=None, repr=False)
    approach: np.ndarray | None = field(default=None, repr=False)
    materials: tuple | None = field(default=None, repr=False)

    @property
    def n_contacts(self) -> int:
        return int(self.J_c.shape[0])

    def kkt_data(self):
        """``(M, b, Je, e0, G, F, g)`` in the form consumed by the solver."""
        nc, n = self.J_c.shape
        nf = self.J_f.shape[0]
        m = 2 * nc + nf
        G = np.zeros((m, n))
        G[:nc] = self.J_c
        G[nc : nc + nf] = self.J_f
        F = np.zeros((m, m))
        F[np.arange(nc), np.arange(nc)] = self.compliance
        F[nc : nc + nf, nc + nf :] = self.E
        F[nc + nf :, :nc] = np.diag(self.mu)
        F[nc + nf :, nc : nc + nf] = -self.E.T
        g = np.zeros(m)
        g[:nc] = self.off_c - self.c_vec
        g[nc : nc + nf] = self.off_f
        return self.M, self.b, self.J_e, -self.e_off, G, F, g


@dataclass
class LcpSolution:
    xi_next: np.ndarray
    lambda_e: np.ndarray
    lambda_c: np.ndarray
    lambda_f: np.ndarray
    gamma: np.ndarray
    residuals: dict
    iterations: int
    raw: MlcpSolution = field(repr=False)

    @property
    def slack_c(self) -> np.ndarray:
        return self.raw.s[: len(self.lambda_c)]


@dataclass
class GradientPack:
    d_mass: np.ndarray
    d_inertia: np.ndarray
    d_restitution: np.ndarray
    d_friction: np.ndarray
    d_xi_prev: np.ndarray
    degenerate: bool = False

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "mass": self.d_mass,
            "inertia": self.d_inertia,
            "restitution": self.d_restitution,
            "friction": self.d_friction,
        }


def combine_friction(mu_a, mu_b):
    return np.sqrt(mu_a * mu_b)


def combine_restitution(k_a, k_b):
    return np.maximum(k_a, k_b)


def _body_materials(scene: Scene, params: PhysicsParams):
    """Per-body friction, restitution and dynamic slot (-1 for non-dynamic)."""
    nb = len(scene.bodies)
    fr, re, slot = np.zeros(nb), np.zeros(nb), np.full(nb, -1)
    for k, i in enumerate(scene.dynamic_indices):
        fr[i] = params.friction[k]
        re[i] = params.restitution[k]
        slot[i] = k
    for i, b in enumerate(scene.bodies):
        if not b.is_dynamic:
            fr[i] = b.friction
            re[i] = b.restitution
    return fr, re, slot


def mass_matrix(scene: Scene, state: np.ndarray, params: PhysicsParams) -> np.ndarray:
    """Block-diagonal generalized mass: ``m I3`` and world inertia ``R diag(I) R^T``."""
    dyn = scene.dynamic_indices
    R = quat_to_matrix(state[dyn, 3:7])
    M = np.zeros((6 * len(dyn), 6 * len(dyn)))
    for k in range(len(dyn)):
        M[6 * k : 6 * k + 3, 6 * k : 6 * k + 3] = params.mass[k] * np.eye(3)
        M[6 * k + 3 : 6 * k + 6, 6 * k + 3 : 6 * k + 6] = (R[k] * params.inertia[k]) @ R[k].T
    return M


def twist_vector(state: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    return state[list(indices), 7:13].reshape(-1)


def _dyn_columns(scene: Scene) -> np.ndarray:
    return np.array([6 * i + k for i in scene.dynamic_indices for k in range(6)], dtype=int)


def _prescribed(scene: Scene, state: np.ndarray, kin_twists) -> tuple[np.ndarray, np.ndarray]:
    """Twists of all bodies now and the prescribed ones over the coming step
    (dynamic rows zero in the latter; static rows zero in both)."""
    now = state[:, 7:13].copy()
    nxt = now.copy() if kin_twists is None else np.array(kin_twists, dtype=float).reshape(-1, 6)
    for i, body in enumerate(scene.bodies):
        if body.role == "static":
            now[i] = 0.0
            nxt[i] = 0.0
        elif body.is_dynamic:
            nxt[i] = 0.0
    return now, nxt


def assemble_lcp(
    scene: Scene,
    state: np.ndarray,
    params: PhysicsParams,
    h: float,
    kin_twists=None,
    contacts: ContactSet | None = None,
) -> LcpProblem:
    """Build the LCP for one substep of length ``h``.

    ``kin_twists`` is an ``(n_bodies, 6)`` array whose kinematic rows hold the
    prescribed twists over the step (other rows are ignored); when omitted the
    kinematic bodies keep the twist stored in ``state``.  The restitution
    target uses the relative velocities in ``state``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    sim = scene.sim
    dyn = scene.dynamic_indices
    cols = _dyn_columns(scene)
    state = np.asarray(state, dtype=float)
    cs = detect_contacts(scene, state) if contacts is None else contacts
    jac = build_jacobians(scene, cs, state)

    R = quat_to_matrix(state[dyn, 3:7])
    M = mass_matrix(scene, state, params)
    xi_prev = twist_vector(state, dyn)
    grav = np.asarray(sim.gravity, dtype=float)
    f_g = np.zeros(6 * len(dyn))
    for k in range(len(dyn)):
        f_g[6 * k : 6 * k + 3] = params.mass[k] * grav
    b = M @ xi_prev + h * f_g

    now, nxt = _prescribed(scene, state, kin_twists)
    now_all, nxt_all = now.reshape(-1), nxt.reshape(-1)
    off_c = jac.J_c @ nxt_all
    off_f = jac.J_f @ nxt_all
    e_off = jac.J_e @ nxt_all

    fr, re, slot = _body_materials(scene, params)
    ia, ib = cs.body_a, cs.body_b
    mu = combine_friction(fr[ia], fr[ib])
    k = combine_restitution(re[ia], re[ib])
    approach = jac.J_c @ now_all
    c_vec = -k * np.minimum(approach, 0.0) + (sim.beta / h) * np.maximum(cs.depths - sim.slop, 0.0)
    return LcpProblem(
        M,
        b,
        jac.J_e[:, cols],
        e_off,
        jac.J_c[:, cols],
        jac.J_f[:, cols],
        jac.E,
        c_vec,
        off_c,
        off_f,
        mu,
        k,
        cs,
        xi_prev,
        compliance=sim.compliance,
        h=h,
        jac=jac,
        rotations=R,
        inertia=params.inertia.copy(),
        now=now_all,
        nxt=nxt_all,
        approach=approach,
        materials=(fr, re, slot),
    )


def solve_lcp(problem: LcpProblem, cfg: SolverConfig | None = None) -> LcpSolution:
    M = problem.M
    if not np.isfinite(M).all():
        raise ValueError("mass matrix has non-finite entries")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError("mass matrix is not symmetric positive definite") from exc
    raw = solve_mlcp(*problem.kkt_data(), cfg=cfg)
    nc = problem.n_contacts
    nf = problem.J_f.shape[0]
    lam = raw.lam
    return LcpSolution(
        xi_next=raw.x,
        lambda_e=raw.y,
        lambda_c=lam[:nc],
        lambda_f=lam[nc : nc + nf],
        gamma=lam[nc + nf :],
        residuals=raw.residuals,
        iterations=raw.iterations,
        raw=raw,
    )


@dataclass
class _LcpAdjoint:
    """Gradients of one LCP solve with respect to everything it was built from."""

    params: dict[str, np.ndarray]
    xi_now: np.ndarray  # over all bodies' current twists
    nxt: np.ndarray  # over all bodies' prescribed twists
    rotations: np.ndarray  # (n_dyn, 3, 3)
    J_e: np.ndarray
    J_c: np.ndarray
    J_f: np.ndarray
    depths: np.ndarray


def _lcp_adjoint(scene: Scene, problem: LcpProblem, sol: LcpSolution, x_bar: np.ndarray, n_params: int) -> _LcpAdjoint:
    nb = len(scene.bodies)
    nd = len(scene.dynamic_indices)
    cols = _dyn_columns(scene)
    nc = problem.n_contacts
    nf = problem.J_f.shape[0]
    M, b, Je, e0, G, F, g = problem.kkt_data()
    gr = mlcp_adjoint(M, Je, G, F, sol.raw, x_bar)
    jac = problem.jac
    sim = scene.sim
    h = problem.h

    d_mass = np.zeros(n_params)
    d_inertia = np.zeros((n_params, 3))
    d_rest = np.zeros(n_params)
    d_fric = np.zeros(n_params)

    # right-hand side b = M xi_prev + h f_g
    gb = gr["b"]
    gM = gr["M"] + np.outer(gb, problem.xi_prev)
    xi_now = np.zeros(6 * nb)
    xi_now[cols] += M.T @ gb
    grav = np.asarray(sim.gravity, dtype=float)
    R_bar = np.zeros((nd, 3, 3))
    for k in range(nd):
        s = slice(6 * k, 6 * k + 3)
        a = slice(6 * k + 3, 6 * k + 6)
        d_mass[k] += np.trace(gM[s, s]) + h * grav @ gb[s]
        A = gM[a, a]
        R = problem.rotations[k]
        d_inertia[k] += np.einsum("ij,ik,kj->j", R, A, R)
        R_bar[k] = (A + A.T) @ R * problem.inertia[k]

    # constraint rows: dynamic columns from the solver, the rest via the offsets
    gg = gr["g"]
    off_c_bar = gg[:nc]
    c_bar = -gg[:nc]
    off_f_bar = gg[nc : nc + nf]
    Jc_bar = np.outer(off_c_bar, problem.nxt)
    Jf_bar = np.outer(off_f_bar, problem.nxt)
    Jc_bar[:, cols] += gr["G"][:nc]
    Jf_bar[:, cols] += gr["G"][nc : nc + nf]
    Je_bar = -np.outer(gr["e0"], problem.nxt)
    Je_bar[:, cols] += gr["Je"]
    nxt_bar = jac.J_c.T @ off_c_bar + jac.J_f.T @ off_f_bar - jac.J_e.T @ gr["e0"]

    # restitution target and penetration bias
    approach = problem.approach
    neg = approach < 0
    k_bar = -np.minimum(approach, 0.0) * c_bar
    approach_bar = -problem.restitution * neg * c_bar
    depth_bar = (sim.beta / h) * (problem.contacts.depths > sim.slop) * c_bar
    Jc_bar += np.outer(approach_bar, problem.now)
    xi_now += jac.J_c.T @ approach_bar

    # pairwise materials
    fr, re, slot = problem.materials
    cs = problem.contacts
    mu_bar = np.diagonal(gr["F"][nc + nf :, :nc]) if nc else np.zeros(0)
    for c in range(nc):
        a, bb = cs.body_a[c], cs.body_b[c]
        mu = problem.mu[c]
        if mu > 0:
            if slot[a] >= 0:
                d_fric[slot[a]] += mu_bar[c] * fr[bb] / (2 * mu)
            if slot[bb] >= 0:
                d_fric[slot[bb]] += mu_bar[c] * fr[a] / (2 * mu)
        winner = a if re[a] >= re[bb] else bb
        if slot[winner] >= 0:
            d_rest[slot[winner]] += k_bar[c]
    return _LcpAdjoint(
        {"mass": d_mass, "inertia": d_inertia, "restitution": d_rest, "friction": d_fric},
        xi_now,
        nxt_bar,
        R_bar,
        Je_bar,
        Jc_bar,
        Jf_bar,
        depth_bar,
    )


def lcp_backward(
    problem: LcpProblem,
    solution: LcpSolution,
    adjoint_xi_next,
    params: PhysicsParams,
    scene: Scene,
) -> GradientPack:
    """Gradients of ``<adjoint, xi_next>`` with respect to the physical parameters
    and the dynamic bodies' previous twists, at a fixed configuration."""
    adj = np.asarray(adjoint_xi_next, dtype=float).reshape(-1)
    out = _lcp_adjoint(scene, problem, solution, adj, params.n_bodies)
    cols = _dyn_columns(scene)
    return GradientPack(
        out.params["mass"],
        out.params["inertia"],
        out.params["restitution"],
        out.params["friction"],
        out.xi_now[cols],
        degenerate=solution.raw.degenerate,
    )


@dataclass
class Substep:
    """Everything one simulation step needs for its backward pass."""

    state: np.ndarray
    kin_twists: np.ndarray | None
    new_state: np.ndarray
    problem: LcpProblem
    solution: LcpSolution


def _integrate_all(scene: Scene, state, twists, h):
    """Integrate every non-static body with the given twists ``(n_bodies, 6)``."""
    new = state.copy()
    for i, body in enumerate(scene.bodies):
        if body.role == "static":
            continue
        tw = twists[i]
        new[i, 0:3], new[i, 3:7] = integrate_pose(state[i, 0:3], state[i, 3:7], tw[:3], tw[3:], h)
        new[i, 7:13] = tw
    return new


def step(
    scene: Scene,
    state: np.ndarray,
    kin_twists,
    params: PhysicsParams,
    h: float | None = None,
    cfg: SolverConfig | None = None,
    keep: bool = False,
):
    """Advance one substep: detect, assemble, solve, integrate.

    Returns the new state, or a :class:`Substep` record when ``keep`` is set.
    """
    h = scene.sim.h if h is None else h
    cfg = cfg or SolverConfig(scene.sim.tol, scene.sim.max_iter)
    state = np.asarray(state, dtype=float)
    problem = assemble_lcp(scene, state, params, h, kin_twists)
    sol = solve_lcp(problem, cfg)
    now, nxt = _prescribed(scene, state, kin_twists)
    twists = nxt.copy()
    twists[scene.dynamic_indices] = sol.xi_next.reshape(-1, 6)
    new_state = _integrate_all(scene, state, twists, h)
    if keep:
        kt = None if kin_twists is None else np.array(kin_twists, dtype=float).reshape(-1, 6)
        return Substep(state, kt, new_state, problem, sol)
    return new_state


def step_backward(scene: Scene, rec: Substep, params: PhysicsParams, new_state_bar: np.ndarray):
    """Reverse one substep: returns ``(state_bar, param_grads)``."""
    h = rec.problem.h
    state = rec.state
    nb = len(scene.bodies)
    dyn = scene.dynamic_indices
    S_bar = np.zeros_like(state)
    tw_bar = np.zeros((nb, 6))
    for i, body in enumerate(scene.bodies):
        sb = new_state_bar[i]
        if body.role == "static":
            S_bar[i] += sb
            continue
        tw = rec.new_state[i, 7:13]
        S_bar[i, 0:3] += sb[0:3]
        q_bar, w_bar = integrate_pose_vjp(state[i, 3:7], tw[3:], h, sb[3:7])
        S_bar[i, 3:7] += q_bar
        tw_bar[i, :3] = sb[7:10] + h * sb[0:3]
        tw_bar[i, 3:] = sb[10:13] + w_bar

    x_bar = tw_bar[dyn].reshape(-1)
    adj = _lcp_adjoint(scene, rec.problem, rec.solution, x_bar, params.n_bodies)
    static = [i for i, b in enumerate(scene.bodies) if b.role == "static"]
    xi_now_bar = adj.xi_now.reshape(nb, 6)
    xi_now_bar[static] = 0.0
    S_bar[:, 7:13] += xi_now_bar
    if rec.kin_twists is None:
        # kinematic bodies carried their current twist through the step
        for i in scene.kinematic_indices:
            S_bar[i, 7:13] += tw_bar[i] + adj.nxt.reshape(nb, 6)[i]

    # geometry: Jacobian rows, contact frames and rotations depend on the poses
    cs = rec.problem.contacts
    xb, nbar, pos_bar = jacobian_vjp(scene, cs, state, adj.J_c, adj.J_f)
    S_bar[:, 0:3] += pos_bar
    S_bar[:, 0:7] += contact_vjp(scene, cs, state, xb, nbar, adj.depths)
    if scene.joints:
        S_bar[:, 0:7] += joint_rows_vjp(scene, state, adj.J_e)
    for k, i in enumerate(dyn):
        S_bar[i, 3:7] += quat_to_matrix_vjp(state[i, 3:7], adj.rotations[k])
    return S_bar, adj.params


def action_twists(scene: Scene, d, H: float) -> np.ndarray:
    """Kinematic twists for an end-effector translation ``d`` spread over ``H``."""
    tw = np.zeros((len(scene.bodies), 6))
    d = np.asarray(d, dtype=float).reshape(3)
    ee = scene.end_effector
    if ee is None:
        if np.any(d != 0):
            raise ValueError("scene has no kinematic end-effector to apply a non-zero action")
        return tw
    tw[ee, :3] = d / H
    return tw


@dataclass
class Trajectory:
    """States at action boundaries: ``states[0]`` is the initial state."""

    states: list[np.ndarray]
    actions: list[np.ndarray]
    H: float
    h: float
    body_names: list[str] = field(default_factory=list)
    substeps: list[Substep] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.states)

    def poses(self, body: int) -> tuple[np.ndarray, np.ndarray]:
        S = np.stack(self.states)
        return S[:, body, 0:3], S[:, body, 3:7]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"format": TRAJ_FORMAT, "H": self.H, "h": self.h, "bodies": self.body_names})]
        for t, s in enumerate(self.states):
            rec = {
                "t": t,
                "action": None if t == 0 else [float(x) for x in self.actions[t - 1]],
                "bodies": [
                    {
                        "p": [float(x) for x in row[0:3]],
                        "q": [float(x) for x in row[3:7]],
                        "v": [float(x) for x in row[7:10]],
                        "w": [float(x) for x in row[10:13]],
                    }
                    for row in s
                ],
            }
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
        if not lines:
            raise ValueError("empty trajectory file")
        head = json.loads(lines[0])
        if head.get("format") != TRAJ_FORMAT:
            raise ValueError(f"trajectory format must be {TRAJ_FORMAT!r}")
        states, actions = [], []
        for line in lines[1:]:
            rec = json.loads(line)
            rows = [b["p"] + b["q"] + b["v"] + b["w"] for b in rec["bodies"]]
            states.append(np.array(rows, dtype=float))
            if rec["t"] > 0:
                actions.append(np.array(rec["action"], dtype=float))
        return cls(states, actions, float(head["H"]), float(head["h"]), list(head.get("bodies", [])))


def rollout(
    scene: Scene,
    state0: np.ndarray,
    actions: Sequence,
    params: PhysicsParams | None = None,
    cfg: SolverConfig | None = None,
    record_tape: bool = False,
) -> Trajectory:
    """Apply each end-effector translation ``d`` as a constant twist ``d / H`` for
    ``H / h`` substeps.  With ``record_tape`` the per-substep records needed
    by :func:`backward_through_time` are kept on the trajectory."""
    params = scene.params if params is None else params
    sim = scene.sim
    n_sub = sim.substeps
    state = np.asarray(state0, dtype=float)
    states = [state]
    acts, tape = [], []
    for d in actions:
        tw = action_twists(scene, d, sim.H)
        acts.append(np.asarray(d, dtype=float).reshape(3))
        for _ in range(n_sub):
            if record_tape:
                rec = step(scene, state, tw, params, sim.h, cfg, keep=True)
                tape.append(rec)
                state = rec.new_state
            else:
                state = step(scene, state, tw, params, sim.h, cfg)
        states.append(state)
    return Trajectory(states, acts, sim.H, sim.h, [b.name for b in scene.bodies], tape)


def backward_through_time(scene: Scene, traj: Trajectory, params: PhysicsParams, state_bars: Sequence):
    """Chain adjoints on the boundary states back through every recorded substep.

    ``state_bars[t]`` is the gradient of the loss with respect to
    ``traj.states[t]`` (``None`` for no contribution).  Returns
    ``(param_grads, state0_bar)`` where ``param_grads`` maps group names to
    arrays shaped like the corresponding :class:`PhysicsParams` fields.
    """
    if len(traj.states) > 1 and not traj.substeps:
        raise ValueError("trajectory was rolled out without record_tape")
    n_sub = len(traj.substeps) // max(len(traj.states) - 1, 1)
    grads = {
        "mass": np.zeros(params.n_bodies),
        "inertia": np.zeros((params.n_bodies, 3)),
        "restitution": np.zeros(params.n_bodies),
        "friction": np.zeros(params.n_bodies),
    }
    shape = traj.states[0].shape
    bar = np.zeros(shape)
    for t in range(len(traj.states) - 1, -1, -1):
        if state_bars[t] is not None:
            bar = bar + state_bars[t]
        if t == 0:
            break
        for rec in reversed(traj.substeps[(t - 1) * n_sub : t * n_sub]):
            bar, g = step_backward(scene, rec, params, bar)
            for key in grads:
                grads[key] += g[key]
    return grads, bar


def simulate(scene: Scene, state0: np.ndarray, n_steps: int, params: PhysicsParams | None = None, cfg=None):
    """Free simulation with kinematic bodies holding their current twist."""
    params = scene.params if params is None else params
    out = [np.asarray(state0, dtype=float)]
    state = out[0]
    for _ in range(n_steps):
        state = step(scene, state, None, params, scene.sim.h, cfg)
        out.append(state)
    return out
