"""Contact detection between shape pairs and the constraint Jacobians.

Every contact remembers how its point, normal and depth were computed from the
poses of the two bodies, so :func:`contact_vjp` can push gradients on those
quantities back onto the poses.  Discrete choices (which vertex is within the
margin, which polytope feature is closest) are held fixed when differentiating.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .scene import ConvexPolytope, HalfSpacePlane, Scene, Sphere
from .so3 import quat_to_matrix, quat_to_matrix_vjp

# contact kinds
POLY_PLANE, SPHERE_PLANE, SPHERE_POLY, SPHERE_SPHERE = range(4)


@dataclass
class ContactSet:
    points: np.ndarray  # (nc, 3) world frame
    normals: np.ndarray  # (nc, 3) from body_b into body_a
    depths: np.ndarray  # (nc,) penetration, negative when separated
    body_a: np.ndarray  # (nc,) int
    body_b: np.ndarray  # (nc,) int
    features: list[int]
    tangents: np.ndarray  # (nc, n_d, 3)
    # per-contact (kind, data) needed by contact_vjp
    geometry: list[tuple] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.body_a)


class Jacobians(NamedTuple):
    """Constraint rows over the twists of *all* bodies, 6 columns per body ``[v, w]``."""

    J_e: np.ndarray
    J_c: np.ndarray
    J_f: np.ndarray
    E: np.ndarray


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (cheaper than ``np.cross`` for small arrays)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack((a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0), axis=-1)


class _Tables(NamedTuple):
    V: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    edges: list
    edge_a: np.ndarray  # (E, 3) start points
    edge_ab: np.ndarray  # (E, 3) directions
    # per face: in-plane inward edge normals and their offsets
    face_edge_n: list
    face_edge_d: list


@functools.lru_cache(maxsize=64)
def _polytope_tables(shape: ConvexPolytope) -> _Tables:
    normals, offsets = shape.face_planes()
    V = shape.vertex_array
    edges = set()
    fen, fed = [], []
    for f, face in enumerate(shape.faces):
        loop = V[list(face)]
        nxt = np.roll(loop, -1, axis=0)
        m = cross(np.broadcast_to(normals[f], loop.shape), nxt - loop)
        fen.append(m)
        fed.append(np.sum(m * loop, axis=1))
        for i in range(len(face)):
            a, b = face[i], face[(i + 1) % len(face)]
            edges.add((min(a, b), max(a, b)))
    edges = sorted(edges)
    ea = V[[i for i, _ in edges]]
    eb = V[[j for _, j in edges]]
    return _Tables(V, normals, offsets, edges, ea, eb - ea, fen, fed)


def closest_feature(shape: ConvexPolytope, c: np.ndarray) -> tuple[str, int | tuple[int, int]]:
    """Feature of the polytope surface closest to the local point ``c``.

    Returns ``("inside", face)``, ``("face", face)``, ``("edge", (i, j))`` or
    ``("vertex", i)``.
    """
    tb = _polytope_tables(shape)
    signed = tb.normals @ c - tb.offsets
    if signed.max() <= 0:
        return "inside", int(np.argmax(signed))
    best, best_d = None, math.inf
    for f in np.flatnonzero(signed > 0):
        x = c - signed[f] * tb.normals[f]
        if signed[f] < best_d and (tb.face_edge_n[f] @ x - tb.face_edge_d[f]).min() >= -1e-12:
            best, best_d = ("face", int(f)), signed[f]
    ab = tb.edge_ab
    t = np.clip(np.sum((c - tb.edge_a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
    d = np.linalg.norm(c - (tb.edge_a + t[:, None] * ab), axis=1)
    e = int(np.argmin(d))
    if d[e] < best_d - 1e-15:
        i, j = tb.edges[e]
        if t[e] <= 0.0:
            best = ("vertex", i)
        elif t[e] >= 1.0:
            best = ("vertex", j)
        else:
            best = ("edge", (i, j))
    return best


@functools.lru_cache(maxsize=8)
def _pyramid(n_d: int) -> tuple[np.ndarray, np.ndarray]:
    ang = np.arange(n_d) * (2 * math.pi / n_d)
    cos, sin = np.cos(ang), np.sin(ang)
    # snap so that the ±t1/±t2 directions are exact
    cos[np.abs(cos) < 1e-12] = 0.0
    sin[np.abs(sin) < 1e-12] = 0.0
    return cos, sin


def _first_tangent(normals: np.ndarray):
    axis = np.argmin(np.abs(normals), axis=1)
    a = np.eye(3)[axis]
    u = a - np.sum(a * normals, axis=1, keepdims=True) * normals
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    return a, u, nu


def tangent_basis(normals: np.ndarray, n_d: int) -> np.ndarray:
    """``n_d`` unit tangent directions per normal, evenly spaced, starting at the
    Gram–Schmidt projection of the smallest-magnitude world axis."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(normals) == 0:
        return np.zeros((0, n_d, 3))
    _, u, nu = _first_tangent(normals)
    t1 = u / nu
    t2 = cross(normals, t1)
    cos, sin = _pyramid(n_d)
    return cos[None, :, None] * t1[:, None, :] + sin[None, :, None] * t2[:, None, :]


def tangent_basis_vjp(normals: np.ndarray, t_bar: np.ndarray) -> np.ndarray:
    """Gradient on the normals given gradients on the tangent directions."""
    if len(normals) == 0:
        return np.zeros((0, 3))
    a, u, nu = _first_tangent(normals)
    t1 = u / nu
    cos, sin = _pyramid(t_bar.shape[1])
    t1_bar = np.einsum("j,cjk->ck", cos, t_bar)
    t2_bar = np.einsum("j,cjk->ck", sin, t_bar)
    # t2 = n × t1
    n_bar = cross(t1, t2_bar)
    t1_bar = t1_bar + cross(t2_bar, normals)
    u_bar = (t1_bar - t1 * np.sum(t1 * t1_bar, axis=1, keepdims=True)) / nu
    # u = a - (a·n) n
    an = np.sum(a * normals, axis=1, keepdims=True)
    n_bar -= an * u_bar + a * np.sum(normals * u_bar, axis=1, keepdims=True)
    return n_bar


# pair helpers: each returns a list of (point, normal, depth, feature, geometry)


def _polytope_plane(shape, plane, p, R, margin):
    V = shape.vertex_array
    X = p + V @ R.T
    n = np.asarray(plane.normal, dtype=float)
    depth = plane.offset - X @ n
    out = []
    for k in np.flatnonzero(depth >= -margin):
        out.append((X[k], n, depth[k], int(k), (POLY_PLANE, V[k])))
    return out


def _sphere_plane(sphere, plane, c, margin):
    n = np.asarray(plane.normal, dtype=float)
    depth = sphere.radius - (c @ n - plane.offset)
    if depth < -margin:
        return []
    return [(c - sphere.radius * n, n, depth, 0, (SPHERE_PLANE, sphere.radius))]


def _sphere_polytope(sphere, shape, c, p, R, margin):
    u = c - p
    c_loc = R.T @ u
    kind, feat = closest_feature(shape, c_loc)
    tb = _polytope_tables(shape)
    V, normals, offsets = tb.V, tb.normals, tb.offsets
    if kind in ("face", "inside"):
        n_loc = normals[feat]
        dist = c_loc @ n_loc - offsets[feat]
        x_loc = c_loc - dist * n_loc
        fid, P = feat, None
    else:
        if kind == "edge":
            a, b = V[feat[0]], V[feat[1]]
            ab = b - a
            P = np.outer(ab, ab) / (ab @ ab)
            x_loc = a + P @ (c_loc - a)
            fid = 1000 + feat[0] * 100 + feat[1]
        else:
            x_loc = V[feat]
            P = np.zeros((3, 3))
            fid = 2000 + feat
        diff = c_loc - x_loc
        dist = np.linalg.norm(diff)
        if dist < 1e-12:
            return []
        n_loc = diff / dist
    depth = sphere.radius - dist
    if depth < -margin:
        return []
    geom = (SPHERE_POLY, (u, c_loc, x_loc, n_loc, dist, P))
    return [(p + R @ x_loc, R @ n_loc, depth, fid, geom)]


def _sphere_sphere(ra, rb, ca, cb, margin):
    diff = ca - cb
    dist = np.linalg.norm(diff)
    if dist < 1e-12:
        return []
    depth = ra + rb - dist
    if depth < -margin:
        return []
    n = diff / dist
    return [(cb + rb * n, n, depth, 0, (SPHERE_SPHERE, (rb, n, dist)))]


def detect_contacts(scene: Scene, state: np.ndarray, margin: float | None = None) -> ContactSet:
    """All contacts within ``margin`` of touching, ordered by body pair then feature."""
    margin = scene.sim.margin if margin is None else margin
    bodies = scene.bodies
    pos = state[:, 0:3]
    rots = quat_to_matrix(state[:, 3:7])
    found, A, B = [], [], []

    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            bi, bj = bodies[i], bodies[j]
            if not (bi.is_dynamic or bj.is_dynamic):
                continue
            si, sj = bi.shape, bj.shape
            # orient so that (a, b) matches the helper's argument order
            if isinstance(sj, HalfSpacePlane) or (isinstance(si, Sphere) and isinstance(sj, ConvexPolytope)):
                a, b = i, j
            else:
                a, b = j, i
            sa, sb = bodies[a].shape, bodies[b].shape
            if isinstance(sb, HalfSpacePlane) and isinstance(sa, ConvexPolytope):
                res = _polytope_plane(sa, sb, pos[a], rots[a], margin)
            elif isinstance(sb, HalfSpacePlane) and isinstance(sa, Sphere):
                res = _sphere_plane(sa, sb, pos[a], margin)
            elif isinstance(sa, Sphere) and isinstance(sb, ConvexPolytope):
                res = _sphere_polytope(sa, sb, pos[a], pos[b], rots[b], margin)
            elif isinstance(sa, Sphere) and isinstance(sb, Sphere):
                res = _sphere_sphere(sa.radius, sb.radius, pos[a], pos[b], margin)
            else:
                # polytope-polytope pairs are not handled (no GJK/EPA)
                res = []
            found.extend(res)
            A.extend([a] * len(res))
            B.extend([b] * len(res))
    n_d = scene.sim.n_d
    if found:
        points = np.array([f[0] for f in found])
        normals = np.array([f[1] for f in found])
        depths = np.array([f[2] for f in found], dtype=float)
    else:
        points, normals, depths = np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return ContactSet(
        points,
        normals,
        depths,
        np.array(A, dtype=int),
        np.array(B, dtype=int),
        [f[3] for f in found],
        tangent_basis(normals, n_d),
        [f[4] for f in found],
    )


def contact_vjp(scene: Scene, cs: ContactSet, state: np.ndarray, x_bar, n_bar, d_bar) -> np.ndarray:
    """Gradient on the ``(n_bodies, 7)`` poses ``[p, q]`` from gradients on
    contact points, normals and depths."""
    out = np.zeros((len(scene.bodies), 7))
    for c, (kind, data) in enumerate(cs.geometry):
        a, b = cs.body_a[c], cs.body_b[c]
        xb, nb, db = x_bar[c], n_bar[c], d_bar[c]
        if kind == POLY_PLANE:
            g = xb - cs.normals[c] * db
            out[a, :3] += g
            out[a, 3:] += quat_to_matrix_vjp(state[a, 3:7], np.outer(g, data))
        elif kind == SPHERE_PLANE:
            out[a, :3] += xb - cs.normals[c] * db
        elif kind == SPHERE_POLY:
            u, c_loc, x_loc, n_loc, dist, P = data
            R = quat_to_matrix(state[b, 3:7])
            R_bar = np.outer(xb, x_loc) + np.outer(nb, n_loc)
            xl_bar = R.T @ xb
            nl_bar = R.T @ nb
            dist_bar = -db
            if P is None:
                cl_bar = xl_bar - n_loc * (n_loc @ xl_bar) + n_loc * dist_bar
            else:
                diff_bar = (nl_bar - n_loc * (n_loc @ nl_bar)) / dist + n_loc * dist_bar
                cl_bar = P @ xl_bar + diff_bar - P @ diff_bar
            u_bar = R @ cl_bar
            R_bar += np.outer(u, cl_bar)
            out[b, :3] += xb - u_bar
            out[b, 3:] += quat_to_matrix_vjp(state[b, 3:7], R_bar)
            out[a, :3] += u_bar
        elif kind == SPHERE_SPHERE:
            rb, n, dist = data
            nt = nb + rb * xb
            diff_bar = (nt - n * (n @ nt)) / dist - n * db
            out[a, :3] += diff_bar
            out[b, :3] += xb - diff_bar
    return out


def _rows(dirs: np.ndarray, lever: np.ndarray) -> np.ndarray:
    return np.concatenate((dirs, cross(lever, dirs)), axis=-1)


def _scatter(n_bodies: int, rows_a, idx_a, rows_b, idx_b) -> np.ndarray:
    n = len(rows_a)
    J = np.zeros((n, n_bodies, 6))
    r = np.arange(n)
    np.add.at(J, (r, idx_a), rows_a)
    np.add.at(J, (r, idx_b), -rows_b)
    return J.reshape(n, 6 * n_bodies)


def build_jacobians(scene: Scene, cs: ContactSet, state: np.ndarray) -> Jacobians:
    """Contact, friction and joint rows mapping stacked twists to constraint velocities.

    A contact row is ``[n, r_a × n]`` for body a and ``-[n, r_b × n]`` for body
    b, so ``J_c ξ`` is the normal relative velocity at the contact point.
    """
    nb = len(scene.bodies)
    nc = len(cs)
    n_d = scene.sim.n_d
    if nc:
        pos = state[:, 0:3]
        ia, ib = cs.body_a, cs.body_b
        ra = cs.points - pos[ia]
        rb = cs.points - pos[ib]
        J_c = _scatter(nb, _rows(cs.normals, ra), ia, _rows(cs.normals, rb), ib)
        T = cs.tangents.reshape(nc * n_d, 3)
        ra_f = np.repeat(ra, n_d, axis=0)
        rb_f = np.repeat(rb, n_d, axis=0)
        J_f = _scatter(nb, _rows(T, ra_f), np.repeat(ia, n_d), _rows(T, rb_f), np.repeat(ib, n_d))
    else:
        J_c = np.zeros((0, 6 * nb))
        J_f = np.zeros((0, 6 * nb))
    E = np.kron(np.eye(nc), np.ones((n_d, 1)))
    J_e = joint_rows(scene, state)
    return Jacobians(J_e, J_c, J_f, E)


def _rows_vjp(dirs, lever, rows_bar):
    """Gradients ``(dirs_bar, lever_bar)`` of ``[d, r × d]``."""
    ang = rows_bar[:, 3:]
    return rows_bar[:, :3] + cross(ang, lever), cross(dirs, ang)


def jacobian_vjp(scene: Scene, cs: ContactSet, state: np.ndarray, Jc_bar, Jf_bar):
    """Back-propagate row gradients onto ``(points, normals, positions)``."""
    nb = len(scene.bodies)
    nc = len(cs)
    n_d = scene.sim.n_d
    x_bar = np.zeros((nc, 3))
    n_bar = np.zeros((nc, 3))
    pos_bar = np.zeros((nb, 3))
    if nc == 0:
        return x_bar, n_bar, pos_bar
    pos = state[:, 0:3]
    ia, ib = cs.body_a, cs.body_b
    ra = cs.points - pos[ia]
    rb = cs.points - pos[ib]
    Jc_bar = Jc_bar.reshape(nc, nb, 6)
    Jf_bar = Jf_bar.reshape(nc, n_d, nb, 6)
    r = np.arange(nc)
    # normal rows
    da, la = _rows_vjp(cs.normals, ra, Jc_bar[r, ia])
    db, lb = _rows_vjp(cs.normals, rb, -Jc_bar[r, ib])
    n_bar += da + db
    # friction rows
    T = cs.tangents
    ga = Jf_bar[r, :, ia]  # (nc, n_d, 6)
    gb = -Jf_bar[r, :, ib]
    ta, lfa = _rows_vjp(T.reshape(-1, 3), np.repeat(ra, n_d, axis=0), ga.reshape(-1, 6))
    tb, lfb = _rows_vjp(T.reshape(-1, 3), np.repeat(rb, n_d, axis=0), gb.reshape(-1, 6))
    t_bar = (ta + tb).reshape(nc, n_d, 3)
    la = la + lfa.reshape(nc, n_d, 3).sum(1)
    lb = lb + lfb.reshape(nc, n_d, 3).sum(1)
    n_bar += tangent_basis_vjp(cs.normals, t_bar)
    x_bar += la + lb
    np.add.at(pos_bar, ia, -la)
    np.add.at(pos_bar, ib, -lb)
    return x_bar, n_bar, pos_bar


def _joint_local(scene: Scene, body: int, anchor) -> np.ndarray:
    # anchor is fixed in the body frame at its scene-file pose
    init = scene.initial_state()
    R0 = quat_to_matrix(init[body, 3:7])
    return R0.T @ (np.asarray(anchor, dtype=float) - init[body, 0:3])


def _skew(r):
    return np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])


def joint_rows(scene: Scene, state: np.ndarray) -> np.ndarray:
    """Three rows per pin joint: anchor velocity on body a minus that on body b."""
    nb = len(scene.bodies)
    if not scene.joints:
        return np.zeros((0, 6 * nb))
    blocks = []
    for jt in scene.joints:
        J = np.zeros((3, nb, 6))
        for sign, body in ((1.0, jt.body_a), (-1.0, jt.body_b)):
            if body is None:
                continue
            r = quat_to_matrix(state[body, 3:7]) @ _joint_local(scene, body, jt.anchor)
            J[:, body, :3] += sign * np.eye(3)
            J[:, body, 3:] += -sign * _skew(r)
        blocks.append(J.reshape(3, 6 * nb))
    return np.concatenate(blocks)


def joint_rows_vjp(scene: Scene, state: np.ndarray, Je_bar: np.ndarray) -> np.ndarray:
    """Gradient on the ``(n_bodies, 7)`` poses from gradients on the joint rows."""
    nb = len(scene.bodies)
    out = np.zeros((nb, 7))
    for k, jt in enumerate(scene.joints):
        G = Je_bar[3 * k : 3 * k + 3].reshape(3, nb, 6)
        for sign, body in ((1.0, jt.body_a), (-1.0, jt.body_b)):
            if body is None:
                continue
            local = _joint_local(scene, body, jt.anchor)
            A = -sign * G[:, body, 3:]
            r_bar = np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])
            out[body, 3:] += quat_to_matrix_vjp(state[body, 3:7], np.outer(r_bar, local))
    return out
