"""Scene description: shapes, bodies, physical parameters and simulation settings.

Scene files are JSON documents tagged ``"format": "pinwm-scene/1"``::

    {
      "format": "pinwm-scene/1",
      "bodies": [
        {"name": "floor", "role": "static",
         "shape": {"type": "plane", "normal": [0, 0, 1], "offset": 0.0},
         "friction": 0.03, "restitution": 0.0},
        {"name": "box", "role": "dynamic",
         "shape": {"type": "box", "half_extents": [0.05, 0.05, 0.025]},
         "pose": {"p": [0, 0, 0.025], "q": [1, 0, 0, 0]}},
        {"name": "pusher", "role": "kinematic",
         "shape": {"type": "sphere", "radius": 0.01},
         "pose": {"p": [-0.07, 0, 0.025]}, "friction": 0.03}
      ],
      "params": [{"body": "box", "mass": 1.0, "restitution": 0.0, "friction": 0.03}],
      "sim": {"H": 0.1, "h": 0.02}
    }

``box`` shapes are sugar for an 8-vertex convex polytope; polytopes are given
as ``vertices`` (list of ``[x, y, z]``) plus ``faces`` (vertex index loops).
Polytope vertices are expressed in the body frame, whose origin must be the
centroid of the solid.  ``inertia`` may be omitted from a parameter entry, in
which case it is computed from the geometry.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .so3 import quat_normalize

log = logging.getLogger(__name__)

SCENE_FORMAT = "pinwm-scene/1"
ROLES = ("dynamic", "kinematic", "static")
_CLIP = 1e-15


class SceneError(ValueError):
    """Raised when a scene file or scene object violates its schema."""


@dataclass(frozen=True)
class Sphere:
    radius: float

    def validate(self, where: str = "shape") -> None:
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise SceneError(f"{where}.radius must be positive, got {self.radius}")

    def to_json(self) -> dict:
        return {"type": "sphere", "radius": self.radius}


@dataclass(frozen=True)
class HalfSpacePlane:
    """Solid half-space ``{x : normal·x <= offset}``."""

    normal: tuple[float, float, float]
    offset: float = 0.0

    def validate(self, where: str = "shape") -> None:
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise SceneError(f"{where}.normal must be a unit 3-vector")

    def to_json(self) -> dict:
        return {"type": "plane", "normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True)
class ConvexPolytope:
    vertices: tuple[tuple[float, float, float], ...]
    faces: tuple[tuple[int, ...], ...]

    @classmethod
    def box(cls, half_extents: Sequence[float]) -> "ConvexPolytope":
        a, b, c = (float(x) for x in half_extents)
        verts = tuple(
            (sx * a, sy * b, sz * c) for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)
        )
        # outward-facing counter-clockwise loops
        faces = ((0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5))
        return cls(verts, faces)

    @property
    def vertex_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def face_planes(self) -> tuple[np.ndarray, np.ndarray]:
        """Outward unit normals ``(F, 3)`` and offsets ``(F,)`` with ``n·x <= d`` inside."""
        V = self.vertex_array
        centroid = V.mean(axis=0)
        normals, offsets = [], []
        for face in self.faces:
            P = V[list(face)]
            # Newell's method is robust for slightly non-planar loops
            n = np.zeros(3)
            for i in range(len(P)):
                a, b = P[i], P[(i + 1) % len(P)]
                n += np.array(
                    [(a[1] - b[1]) * (a[2] + b[2]), (a[2] - b[2]) * (a[0] + b[0]), (a[0] - b[0]) * (a[1] + b[1])]
                )
            norm = np.linalg.norm(n)
            if norm < 1e-15:
                raise SceneError("polytope has a degenerate face")
            n /= norm
            d = float(n @ P.mean(axis=0))
            if n @ centroid > d:
                n, d = -n, -d
            normals.append(n)
            offsets.append(d)
        return np.array(normals), np.array(offsets)

    def face_areas(self) -> np.ndarray:
        V = self.vertex_array
        areas = []
        for face in self.faces:
            P = V[list(face)]
            a = 0.0
            for i in range(1, len(P) - 1):
                a += 0.5 * np.linalg.norm(np.cross(P[i] - P[0], P[i + 1] - P[0]))
            areas.append(a)
        return np.array(areas)

    def validate(self, where: str = "shape") -> None:
        V = self.vertex_array
        if V.ndim != 2 or V.shape[1] != 3 or len(V) < 4:
            raise SceneError(f"{where}.vertices needs at least 4 points of 3 coordinates")
        if not np.isfinite(V).all():
            raise SceneError(f"{where}.vertices must be finite")
        if not self.faces:
            raise SceneError(f"{where}.faces must be non-empty")
        for face in self.faces:
            if len(face) < 3 or min(face) < 0 or max(face) >= len(V):
                raise SceneError(f"{where}.faces has an invalid index loop {list(face)}")
        normals, offsets = self.face_planes()
        excess = V @ normals.T - offsets
        if excess.max() > 1e-9:
            raise SceneError(f"{where}.vertices do not form a convex polytope")

    def to_json(self) -> dict:
        return {
            "type": "polytope",
            "vertices": [list(v) for v in self.vertices],
            "faces": [list(f) for f in self.faces],
        }


BodyShape = Sphere | HalfSpacePlane | ConvexPolytope


def shape_from_json(d: dict, where: str = "shape") -> BodyShape:
    kind = d.get("type")
    try:
        if kind == "sphere":
            shape = Sphere(float(d["radius"]))
        elif kind == "plane":
            shape = HalfSpacePlane(tuple(float(x) for x in d["normal"]), float(d.get("offset", 0.0)))
        elif kind == "box":
            he = [float(x) for x in d["half_extents"]]
            if len(he) != 3 or min(he) <= 0:
                raise SceneError(f"{where}.half_extents must be three positive numbers")
            shape = ConvexPolytope.box(he)
        elif kind == "polytope":
            shape = ConvexPolytope(
                tuple(tuple(float(c) for c in v) for v in d["vertices"]),
                tuple(tuple(int(i) for i in f) for f in d["faces"]),
            )
        else:
            raise SceneError(f"{where}.type must be one of sphere/plane/box/polytope, got {kind!r}")
    except (KeyError, TypeError) as exc:
        raise SceneError(f"{where} is malformed: {exc}") from exc
    shape.validate(where)
    return shape


@dataclass(frozen=True)
class Body:
    name: str
    shape: BodyShape
    role: str
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    linear_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # material of non-dynamic bodies; dynamic bodies take theirs from PhysicsParams
    friction: float = 0.0
    restitution: float = 0.0

    @property
    def is_dynamic(self) -> bool:
        return self.role == "dynamic"


@dataclass(frozen=True)
class PinJoint:
    """Ball joint keeping a world anchor coincident on two bodies (``body_b`` may be None)."""

    body_a: int
    body_b: int | None
    anchor: tuple[float, float, float]


@dataclass
class PhysicsParams:
    """Per-dynamic-body mass, diagonal body-frame inertia, restitution and friction."""

    mass: np.ndarray
    inertia: np.ndarray
    restitution: np.ndarray
    friction: np.ndarray

    GROUPS = ("mass", "inertia", "restitution", "friction")

    @classmethod
    def create(cls, mass, inertia, restitution, friction) -> "PhysicsParams":
        f64 = lambda x: np.array(x, dtype=float)
        p = cls(f64(mass).reshape(-1), f64(inertia).reshape(-1, 3), f64(restitution).reshape(-1), f64(friction).reshape(-1))
        p.validate()
        return p

    @property
    def n_bodies(self) -> int:
        return int(self.mass.shape[0])

    def validate(self) -> None:
        def check(name, t, ok):
            if not np.isfinite(t).all() or not ok(t).all():
                raise SceneError(f"params.{name} out of range: {t.tolist()}")

        check("mass", self.mass, lambda t: t > 0)
        check("inertia", self.inertia, lambda t: t > 0)
        check("restitution", self.restitution, lambda t: (t >= 0) & (t <= 1))
        check("friction", self.friction, lambda t: t >= 0)
        n = self.mass.shape[0]
        if self.inertia.shape != (n, 3) or self.restitution.shape != (n,) or self.friction.shape != (n,):
            raise SceneError("params arrays have inconsistent sizes")

    def encode(self) -> dict[str, np.ndarray]:
        """Unconstrained representation: log for positive groups, logit for restitution."""
        return {
            "mass": np.log(self.mass),
            "inertia": np.log(self.inertia),
            "restitution": logit(np.clip(self.restitution, _CLIP, 1 - _CLIP)),
            "friction": np.log(np.maximum(self.friction, _CLIP)),
        }

    @classmethod
    def decode(cls, z: dict[str, np.ndarray]) -> "PhysicsParams":
        return cls(
            np.exp(z["mass"]),
            np.exp(z["inertia"]),
            expit(z["restitution"]),
            np.exp(z["friction"]),
        )

    @staticmethod
    def decode_jacobian(z: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Elementwise derivative of :meth:`decode` for each group."""
        k = expit(z["restitution"])
        return {
            "mass": np.exp(z["mass"]),
            "inertia": np.exp(z["inertia"]),
            "restitution": k * (1 - k),
            "friction": np.exp(z["friction"]),
        }

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_group(self, name: str, value) -> "PhysicsParams":
        arr = np.array(value, dtype=float).reshape(self.group(name).shape)
        return replace(self, **{name: arr})

    def copy(self) -> "PhysicsParams":
        return PhysicsParams(self.mass.copy(), self.inertia.copy(), self.restitution.copy(), self.friction.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.group(g).ravel() for g in self.GROUPS])

    def to_json(self, names: Sequence[str]) -> list[dict]:
        out = []
        for i, name in enumerate(names):
            out.append(
                {
                    "body": name,
                    "mass": float(self.mass[i]),
                    "inertia": [float(x) for x in self.inertia[i]],
                    "restitution": float(self.restitution[i]),
                    "friction": float(self.friction[i]),
                }
            )
        return out


@dataclass(frozen=True)
class SimConfig:
    H: float = 0.1
    h: float = 0.01
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    n_d: int = 4
    margin: float = 1e-3
    beta: float = 0.2
    slop: float = 1e-3
    # normal-contact compliance (s/kg); resolves statically indeterminate
    # pressure distributions such as a face resting on four vertices
    compliance: float = 1e-6
    tol: float = 1e-8
    max_iter: int = 50

    @property
    def substeps(self) -> int:
        return int(round(self.H / self.h))

    def validate(self) -> None:
        if not self.h > 0:
            raise SceneError("sim.h must be positive")
        if not self.H >= self.h:
            raise SceneError("sim.H must be at least sim.h")
        if abs(self.H / self.h - self.substeps) > 1e-9 * self.substeps:
            raise SceneError("sim.H / sim.h must be a positive integer")
        if self.n_d < 4 or self.n_d % 2:
            raise SceneError("sim.n_d must be even and at least 4")
        if self.compliance < 0:
            raise SceneError("sim.compliance must be non-negative")
        if self.margin < 0 or self.slop < 0 or not 0 <= self.beta <= 1:
            raise SceneError("sim.margin/slop must be non-negative and beta in [0, 1]")
        if self.tol <= 0 or self.max_iter < 1:
            raise SceneError("sim.tol must be positive and sim.max_iter at least 1")


@dataclass(frozen=True)
class Scene:
    bodies: tuple[Body, ...]
    params: PhysicsParams = field(compare=False)
    sim: SimConfig = SimConfig()
    joints: tuple[PinJoint, ...] = ()

    @property
    def dynamic_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.bodies) if b.is_dynamic]

    @property
    def kinematic_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.bodies) if b.role == "kinematic"]

    @property
    def end_effector(self) -> int | None:
        kin = self.kinematic_indices
        return kin[0] if kin else None

    def body_index(self, name: str) -> int:
        for i, b in enumerate(self.bodies):
            if b.name == name:
                return i
        raise KeyError(name)

    def dynamic_slot(self, body_index: int) -> int:
        return self.dynamic_indices.index(body_index)

    def with_params(self, params: PhysicsParams) -> "Scene":
        return replace(self, params=params)

    def with_sim(self, **kw) -> "Scene":
        sim = replace(self.sim, **kw)
        sim.validate()
        return replace(self, sim=sim)

    def replace_body(self, index: int, **kw) -> "Scene":
        bodies = list(self.bodies)
        bodies[index] = replace(bodies[index], **kw)
        return replace(self, bodies=tuple(bodies))

    def validate(self) -> None:
        names = [b.name for b in self.bodies]
        if len(set(names)) != len(names):
            raise SceneError("bodies must have unique names")
        planes = [b for b in self.bodies if isinstance(b.shape, HalfSpacePlane)]
        if len(planes) > 1:
            raise SceneError("bodies: at most one plane (the floor) is permitted")
        for i, b in enumerate(self.bodies):
            where = f"bodies[{i}]"
            if b.role not in ROLES:
                raise SceneError(f"{where}.role must be one of {ROLES}")
            if isinstance(b.shape, HalfSpacePlane) and b.role != "static":
                raise SceneError(f"{where}: planes must be static")
            q = np.asarray(b.orientation)
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise SceneError(f"{where}.pose.q must be a unit quaternion")
            if b.role == "static" and (any(b.linear_velocity) or any(b.angular_velocity)):
                raise SceneError(f"{where}: static bodies cannot have a twist")
            if b.friction < 0 or not 0 <= b.restitution <= 1:
                raise SceneError(f"{where}: friction must be >= 0 and restitution in [0, 1]")
            if isinstance(b.shape, ConvexPolytope) and b.is_dynamic:
                c = _polytope_mass_properties(b.shape)[1]
                scale = np.abs(b.shape.vertex_array).max()
                if np.abs(c).max() > 1e-9 * max(scale, 1.0):
                    raise SceneError(f"{where}.shape.vertices must be centred on the centroid")
        if self.params.n_bodies != len(self.dynamic_indices):
            raise SceneError("params must list exactly one entry per dynamic body")
        self.params.validate()
        self.sim.validate()
        for j, jt in enumerate(self.joints):
            if not 0 <= jt.body_a < len(self.bodies) or (jt.body_b is not None and not 0 <= jt.body_b < len(self.bodies)):
                raise SceneError(f"joints[{j}] references an unknown body")

    # initial state -------------------------------------------------------

    def initial_state(self) -> np.ndarray:
        """Stacked ``(n_bodies, 13)`` state rows ``[p, q, v, w]``."""
        rows = []
        for b in self.bodies:
            rows.append(list(b.position) + list(b.orientation) + list(b.linear_velocity) + list(b.angular_velocity))
        s = np.array(rows, dtype=float).reshape(-1, 13)
        s[:, 3:7] = quat_normalize(s[:, 3:7])
        return s

    # serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        bodies = []
        for b in self.bodies:
            d = {
                "name": b.name,
                "role": b.role,
                "shape": b.shape.to_json(),
                "pose": {"p": list(b.position), "q": list(b.orientation)},
                "twist": {"v": list(b.linear_velocity), "w": list(b.angular_velocity)},
            }
            if not b.is_dynamic:
                d["friction"] = b.friction
                d["restitution"] = b.restitution
            bodies.append(d)
        names = [self.bodies[i].name for i in self.dynamic_indices]
        sim = self.sim
        return {
            "format": SCENE_FORMAT,
            "bodies": bodies,
            "params": self.params.to_json(names),
            "sim": {
                "H": sim.H,
                "h": sim.h,
                "gravity": list(sim.gravity),
                "n_d": sim.n_d,
                "margin": sim.margin,
                "beta": sim.beta,
                "slop": sim.slop,
                "compliance": sim.compliance,
                "tol": sim.tol,
                "max_iter": sim.max_iter,
            },
            "joints": [
                {"body_a": self.bodies[j.body_a].name, "body_b": None if j.body_b is None else self.bodies[j.body_b].name, "anchor": list(j.anchor)}
                for j in self.joints
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def _vec(d: dict, key: str, n: int, default, where: str) -> tuple[float, ...]:
    val = d.get(key, default)
    try:
        out = tuple(float(x) for x in val)
    except TypeError as exc:
        raise SceneError(f"{where}.{key} must be a list of {n} numbers") from exc
    if len(out) != n or not all(math.isfinite(x) for x in out):
        raise SceneError(f"{where}.{key} must be a list of {n} finite numbers")
    return out


def scene_from_json(doc: dict) -> Scene:
    if doc.get("format", SCENE_FORMAT) != SCENE_FORMAT:
        raise SceneError(f"format must be {SCENE_FORMAT!r}, got {doc.get('format')!r}")
    for key in ("bodies", "params"):
        if key not in doc:
            raise SceneError(f"missing top-level key `{key}`")
    bodies = []
    for i, bd in enumerate(doc["bodies"]):
        where = f"bodies[{i}]"
        if "shape" not in bd:
            raise SceneError(f"{where}.shape is required")
        role = bd.get("role", "dynamic")
        if role not in ROLES:
            raise SceneError(f"{where}.role must be one of {ROLES}, got {role!r}")
        pose = bd.get("pose", {})
        twist = bd.get("twist", {})
        bodies.append(
            Body(
                name=str(bd.get("name", f"body{i}")),
                shape=shape_from_json(bd["shape"], f"{where}.shape"),
                role=role,
                position=_vec(pose, "p", 3, (0.0, 0.0, 0.0), f"{where}.pose"),
                orientation=_vec(pose, "q", 4, (1.0, 0.0, 0.0, 0.0), f"{where}.pose"),
                linear_velocity=_vec(twist, "v", 3, (0.0, 0.0, 0.0), f"{where}.twist"),
                angular_velocity=_vec(twist, "w", 3, (0.0, 0.0, 0.0), f"{where}.twist"),
                friction=float(bd.get("friction", 0.0)),
                restitution=float(bd.get("restitution", 0.0)),
            )
        )
    names = [b.name for b in bodies]
    dyn = [i for i, b in enumerate(bodies) if b.is_dynamic]
    entries = {}
    for j, pd in enumerate(doc["params"]):
        name = pd.get("body")
        if name not in names or not bodies[names.index(name)].is_dynamic:
            raise SceneError(f"params[{j}].body must name a dynamic body, got {name!r}")
        entries[name] = (j, pd)
    mass, inertia, rest, fric = [], [], [], []
    for i in dyn:
        b = bodies[i]
        if b.name not in entries:
            raise SceneError(f"params: missing entry for dynamic body {b.name!r}")
        j, pd = entries[b.name]
        where = f"params[{j}]"
        for key in ("mass", "friction", "restitution"):
            if key not in pd:
                raise SceneError(f"{where}.{key} is required")
        m = float(pd["mass"])
        if not (m > 0 and math.isfinite(m)):
            raise SceneError(f"{where}.mass must be positive, got {m}")
        mu = float(pd["friction"])
        if not (mu >= 0 and math.isfinite(mu)):
            raise SceneError(f"{where}.friction must be non-negative, got {mu}")
        k = float(pd["restitution"])
        if not 0 <= k <= 1:
            raise SceneError(f"{where}.restitution must lie in [0, 1], got {k}")
        if "inertia" in pd:
            I = _vec(pd, "inertia", 3, None, where)
            if min(I) <= 0:
                raise SceneError(f"{where}.inertia entries must be positive")
        else:
            I = tuple(float(x) for x in inertia_from_geometry(b.shape, m))
        mass.append(m)
        inertia.append(I)
        rest.append(k)
        fric.append(mu)
    params = PhysicsParams.create(mass, np.array(inertia).reshape(-1, 3), rest, fric)
    sd = doc.get("sim", {})
    defaults = SimConfig()
    try:
        sim = SimConfig(
            H=float(sd.get("H", defaults.H)),
            h=float(sd.get("h", defaults.h)),
            gravity=_vec(sd, "gravity", 3, defaults.gravity, "sim"),
            n_d=int(sd.get("n_d", defaults.n_d)),
            margin=float(sd.get("margin", defaults.margin)),
            beta=float(sd.get("beta", defaults.beta)),
            slop=float(sd.get("slop", defaults.slop)),
            compliance=float(sd.get("compliance", defaults.compliance)),
            tol=float(sd.get("tol", defaults.tol)),
            max_iter=int(sd.get("max_iter", defaults.max_iter)),
        )
    except (TypeError, ValueError) as exc:
        raise SceneError(f"sim is malformed: {exc}") from exc
    joints = []
    for j, jd in enumerate(doc.get("joints", [])):
        try:
            a = names.index(jd["body_a"])
            b = None if jd.get("body_b") is None else names.index(jd["body_b"])
        except (KeyError, ValueError) as exc:
            raise SceneError(f"joints[{j}] references an unknown body") from exc
        joints.append(PinJoint(a, b, _vec(jd, "anchor", 3, None, f"joints[{j}]")))
    scene = Scene(tuple(bodies), params, sim, tuple(joints))
    scene.validate()
    return scene


def load_scene(path: str | Path) -> Scene:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"scene file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneError("scene file must contain a JSON object")
    return scene_from_json(doc)


def _polytope_mass_properties(shape: ConvexPolytope) -> tuple[float, np.ndarray, np.ndarray]:
    """Volume, centroid and unit-density second-moment tensor about the origin."""
    V = shape.vertex_array
    ref = V.mean(axis=0)
    vol = 0.0
    first = np.zeros(3)
    second = np.zeros((3, 3))
    for face in shape.faces:
        P = V[list(face)]
        for i in range(1, len(P) - 1):
            a, b, c = P[0] - ref, P[i] - ref, P[i + 1] - ref
            det = float(np.dot(a, np.cross(b, c)))
            v = det / 6.0
            vol += v
            first += v * (a + b + c) / 4.0
            # covariance of a tetrahedron with a vertex at the reference point
            s = a + b + c
            second += det / 120.0 * (np.outer(a, a) + np.outer(b, b) + np.outer(c, c) + np.outer(s, s))
    vol = abs(vol)
    if vol < 1e-15:
        raise SceneError("polytope has zero volume")
    sign = 1.0 if np.sum(second.diagonal()) >= 0 else -1.0
    second *= sign
    first *= sign
    centroid = ref + first / vol
    # shift second moment from ref to the origin of the body frame
    second_origin = second + np.outer(ref, first) + np.outer(first, ref) + vol * np.outer(ref, ref)
    return vol, centroid, second_origin


def inertia_from_geometry(shape: BodyShape, mass: float) -> np.ndarray:
    """Diagonal body-frame inertia of a uniform solid about its centroid."""
    if not mass > 0:
        raise SceneError("mass must be positive")
    if isinstance(shape, Sphere):
        return np.full(3, 0.4 * mass * shape.radius**2)
    if isinstance(shape, ConvexPolytope):
        vol, c, second = _polytope_mass_properties(shape)
        cov = second / vol - np.outer(c, c)
        I = mass * (np.trace(cov) * np.eye(3) - cov)
        off = np.abs(I - np.diag(np.diag(I))).max()
        if off > 1e-9 * np.abs(I).max():
            log.warning("polytope inertia has off-diagonal terms (%.3g); keeping the diagonal only", off)
        return np.diag(I).copy()
    raise SceneError("inertia is only defined for spheres and polytopes")
