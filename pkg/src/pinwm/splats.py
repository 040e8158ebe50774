"""CPU 2D Gaussian splatting: surface disks, rigid motion, alpha-blended
rendering and the gradients of an image loss with respect to an object pose.

Rendering runs on torch (float64) so the same code path gives exact
reverse-mode gradients.  Conventions:

* cameras follow the pinhole model with ``x`` right, ``y`` down and ``z``
  forward; the extrinsic maps world points into the camera frame;
* pixel ``(i, j)`` samples the ray through image coordinates ``(i, j)``, so a
  point projecting onto the principal point lands exactly on a pixel;
* splats are depth-sorted once per image by the camera depth of their centres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .scene import BodyShape, ConvexPolytope, HalfSpacePlane, SceneError, Sphere
from .so3 import _right, pose_to_transform, transform_inverse

SPLATS_FORMAT = "pinwm-splats/1"
T_MIN = 1e-4  # blending stops once transmittance drops below this
TILE = 16
# splats are ignored beyond this many standard deviations (weight < 2e-8)
CULL_SIGMA = 6.0
_DT = torch.float64


@dataclass(frozen=True)
class Splat:
    center: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    s_u: float
    s_v: float
    opacity: float
    color: np.ndarray


@dataclass(frozen=True)
class SplatSet:
    """Structure-of-arrays splat collection plus the reference object transform."""

    centers: np.ndarray  # (n, 3)
    t_u: np.ndarray  # (n, 3)
    t_v: np.ndarray  # (n, 3)
    scales: np.ndarray  # (n, 2)
    opacity: np.ndarray  # (n,)
    colors: np.ndarray  # (n, 3)
    reference: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> Splat:
        return Splat(self.centers[i], self.t_u[i], self.t_v[i], float(self.scales[i, 0]), float(self.scales[i, 1]), float(self.opacity[i]), self.colors[i])

    @property
    def normals(self) -> np.ndarray:
        return np.cross(self.t_u, self.t_v)

    def validate(self) -> None:
        n = len(self.centers)
        shapes = {"t_u": (n, 3), "t_v": (n, 3), "scales": (n, 2), "opacity": (n,), "colors": (n, 3)}
        for name, shp in shapes.items():
            if getattr(self, name).shape != shp:
                raise ValueError(f"splats.{name} must have shape {shp}")
        if not all(np.isfinite(getattr(self, k)).all() for k in ("centers", "t_u", "t_v", "scales", "opacity", "colors")):
            raise ValueError("splat parameters must be finite")
        if np.abs(np.sum(self.t_u * self.t_v, axis=1)).max(initial=0) > 1e-9:
            raise ValueError("splat tangents must be orthogonal")
        if np.abs(np.linalg.norm(self.t_u, axis=1) - 1).max(initial=0) > 1e-9 or np.abs(np.linalg.norm(self.t_v, axis=1) - 1).max(initial=0) > 1e-9:
            raise ValueError("splat tangents must be unit vectors")
        if (self.scales <= 0).any():
            raise ValueError("splat scales must be positive")
        if ((self.opacity < 0) | (self.opacity > 1)).any() or ((self.colors < 0) | (self.colors > 1)).any():
            raise ValueError("splat opacity and colors must lie in [0, 1]")
        R = self.reference[:3, :3]
        if self.reference.shape != (4, 4) or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("splat reference transform must be rigid")

    def to_json(self) -> dict:
        return {
            "format": SPLATS_FORMAT,
            "reference_transform": self.reference.tolist(),
            "splats": [
                {
                    "center": self.centers[i].tolist(),
                    "t_u": self.t_u[i].tolist(),
                    "t_v": self.t_v[i].tolist(),
                    "s_u": float(self.scales[i, 0]),
                    "s_v": float(self.scales[i, 1]),
                    "opacity": float(self.opacity[i]),
                    "color": self.colors[i].tolist(),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplatSet":
        if doc.get("format") != SPLATS_FORMAT:
            raise ValueError(f"splat file format must be {SPLATS_FORMAT!r}")
        sp = doc["splats"]
        arr = lambda key: np.array([s[key] for s in sp], dtype=float).reshape(len(sp), -1)
        ss = cls(
            arr("center"),
            arr("t_u"),
            arr("t_v"),
            np.hstack([arr("s_u"), arr("s_v")]),
            arr("opacity").reshape(-1),
            arr("color"),
            np.array(doc.get("reference_transform", np.eye(4).tolist()), dtype=float),
        )
        ss.validate()
        return ss

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "SplatSet":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(default_factory=lambda: np.eye(4))  # world -> camera

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("camera focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera width and height must be at least 1")
        R = np.asarray(self.extrinsic)[:3, :3]
        if np.asarray(self.extrinsic).shape != (4, 4) or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera extrinsic must be a rigid 4x4 transform")

    def moved(self, T: np.ndarray) -> "Camera":
        """Camera whose extrinsic is composed with ``T`` (``cam ∘ T``)."""
        return replace(self, extrinsic=np.asarray(self.extrinsic) @ np.asarray(T))

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height, "extrinsic": np.asarray(self.extrinsic).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        cam = cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]), np.array(d.get("extrinsic", np.eye(4).tolist()), dtype=float))
        cam.validate()
        return cam


def look_at(eye, target, up=(0.0, 0.0, 1.0), size: int = 64, fov_deg: float = 45.0) -> Camera:
    """Square pinhole camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(x, dtype=float) for x in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    c = size / 2
    return Camera(f, f, c, c, size, size, T)


# construction ---------------------------------------------------------------


def _face_frames(shape: ConvexPolytope):
    V = shape.vertex_array
    normals, _ = shape.face_planes()
    areas = shape.face_areas()
    tris, tri_face = [], []
    tus = []
    for f, face in enumerate(shape.faces):
        e = V[face[1]] - V[face[0]]
        tus.append(e / np.linalg.norm(e))
        for i in range(1, len(face) - 1):
            tris.append((V[face[0]], V[face[i]], V[face[i + 1]]))
            tri_face.append(f)
    return np.array(tris), np.array(tri_face), normals, np.array(tus), areas


def init_splats_on_surface(shape: BodyShape, n: int, seed: int = 0) -> SplatSet:
    """``n`` mid-gray splats scattered uniformly over the surface by area, each
    lying in its face plane with isotropic scale ``sqrt(face_area / n)``."""
    if n < 1:
        raise ValueError("need at least one splat")
    rng = np.random.default_rng(seed)
    if isinstance(shape, Sphere):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        centers = shape.radius * d
        a = np.where(np.abs(d[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
        tu = np.cross(d, a)
        tu /= np.linalg.norm(tu, axis=1, keepdims=True)
        tv = np.cross(d, tu)
        scale = np.full(n, math.sqrt(4 * math.pi * shape.radius**2 / n))
    elif isinstance(shape, ConvexPolytope):
        tris, tri_face, normals, face_tu, areas = _face_frames(shape)
        tri_area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
        if tri_area.sum() <= 0:
            raise SceneError("cannot place splats on a degenerate polytope")
        pick = rng.choice(len(tris), size=n, p=tri_area / tri_area.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        t = tris[pick]
        centers = (1 - s)[:, None] * t[:, 0] + (s * (1 - r2))[:, None] * t[:, 1] + (s * r2)[:, None] * t[:, 2]
        f = tri_face[pick]
        tu = face_tu[f]
        tv = np.cross(normals[f], tu)
        scale = np.sqrt(areas[f] / n)
    elif isinstance(shape, HalfSpacePlane):
        raise SceneError("cannot place splats on an unbounded plane")
    else:
        raise SceneError(f"unsupported shape {type(shape).__name__}")
    return SplatSet(centers, tu, tv, np.stack([scale, scale], axis=1), np.full(n, 0.8), np.full((n, 3), 0.5))


def transform_splats(ss: SplatSet, T_t: np.ndarray) -> SplatSet:
    """Move the splats rigidly from the reference transform to ``T_t``."""
    rel = np.asarray(T_t, dtype=float) @ transform_inverse(ss.reference)
    R, t = rel[:3, :3], rel[:3, 3]
    return replace(ss, centers=ss.centers @ R.T + t, t_u=ss.t_u @ R.T, t_v=ss.t_v @ R.T, reference=np.asarray(T_t, dtype=float).copy())


# rendering ------------------------------------------------------------------


def _t(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=_DT)


def _quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q[0], q[1], q[2], q[3]
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
        ]
    )


def _ray_grid(cam: Camera):
    E = np.asarray(cam.extrinsic, dtype=float)
    R, t = E[:3, :3], E[:3, 3]
    origin = -R.T @ t
    xs, ys = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    d_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1).reshape(-1, 3)
    return origin, d_cam @ R  # world-frame ray directions, one row per pixel


def _screen_boxes(centers: np.ndarray, radius: np.ndarray, cam: Camera) -> np.ndarray:
    """Conservative pixel boxes ``(x0, x1, y0, y1)`` of balls around the splat
    centres; splats reaching behind the camera cover the whole image."""
    E = np.asarray(cam.extrinsic, dtype=float)
    pc = centers @ E[:3, :3].T + E[:3, 3]
    corners = pc[:, None, :] + radius[:, None, None] * _CUBE[None]
    z = corners[..., 2]
    front = (z > 1e-9).all(axis=1)
    zs = np.where(z > 1e-9, z, 1.0)
    px = cam.fx * corners[..., 0] / zs + cam.cx
    py = cam.fy * corners[..., 1] / zs + cam.cy
    box = np.stack([px.min(1), px.max(1), py.min(1), py.max(1)], axis=1)
    box[~front] = [-np.inf, np.inf, -np.inf, np.inf]
    return box


_CUBE = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)


def _render_tensors(centers, tu, tv, scales, opacity, colors, cam: Camera) -> torch.Tensor:
    """Differentiable core of :func:`render`; returns an ``(H, W, 3)`` tensor."""
    cam.validate()
    E = np.asarray(cam.extrinsic, dtype=float)
    c_np = centers.detach().numpy()
    order_np = np.argsort(c_np @ E[2, :3] + E[2, 3], kind="stable")
    order = torch.as_tensor(order_np)
    centers, tu, tv, scales, opacity, colors = (a[order] for a in (centers, tu, tv, scales, opacity, colors))
    boxes = _screen_boxes(c_np[order_np], CULL_SIGMA * scales.detach().numpy().max(axis=1), cam)
    origin, dirs = _ray_grid(cam)
    o = _t(origin)
    nrm = torch.linalg.cross(tu, tv)
    rel = o - centers  # (n, 3)
    num = -(rel * nrm).sum(1)  # signed distance from origin to each plane along the normal
    a_u, a_v = (rel * tu).sum(1), (rel * tv).sum(1)
    inv_su2, inv_sv2 = 1.0 / scales[:, 0] ** 2, 1.0 / scales[:, 1] ** 2
    W, H = cam.width, cam.height
    img = torch.zeros(H * W, 3, dtype=_DT)
    pix = np.arange(H * W).reshape(H, W)
    for y0 in range(0, H, TILE):
        for x0 in range(0, W, TILE):
            y1, x1 = min(y0 + TILE, H), min(x0 + TILE, W)
            hit = (boxes[:, 0] <= x1 - 1) & (boxes[:, 1] >= x0) & (boxes[:, 2] <= y1 - 1) & (boxes[:, 3] >= y0)
            k = np.flatnonzero(hit)
            if len(k) == 0:
                continue
            idx = pix[y0:y1, x0:x1].reshape(-1)
            kt = torch.as_tensor(k)
            d = _t(dirs[idx])
            nk, tuk, tvk = nrm[kt], tu[kt], tv[kt]
            den = d @ nk.T  # (p, k)
            ok = den.abs() > 1e-12
            s_ = num[kt] / torch.where(ok, den, torch.ones_like(den))
            ok = ok & (s_ > 0)
            u = a_u[kt] + s_ * (d @ tuk.T)
            v = a_v[kt] + s_ * (d @ tvk.T)
            gauss = torch.exp(-0.5 * (u * u * inv_su2[kt] + v * v * inv_sv2[kt]))
            alpha = torch.where(ok, opacity[kt] * gauss, torch.zeros_like(gauss))
            trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1 - alpha[:, :-1]], dim=1), dim=1)
            live = (trans >= T_MIN).detach()
            w = torch.where(live, trans * alpha, torch.zeros_like(alpha))
            img = img.index_copy(0, torch.as_tensor(idx), w @ colors[kt])
    return img.reshape(H, W, 3).clamp(0.0, 1.0)


def _tensors(ss: SplatSet):
    return tuple(_t(a) for a in (ss.centers, ss.t_u, ss.t_v, ss.scales, ss.opacity, ss.colors))


def render(ss: SplatSet, cam: Camera) -> np.ndarray:
    """Front-to-back alpha blend of the splats seen by ``cam``; ``(H, W, 3)`` in [0, 1]."""
    if len(ss) == 0:
        raise ValueError("cannot render an empty splat set")
    with torch.no_grad():
        return _render_tensors(*_tensors(ss), cam).numpy()


def render_loss(rendered, observed) -> float:
    """Sum of squared differences over all pixels and channels."""
    a, b = np.asarray(rendered, dtype=float), np.asarray(observed, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def _posed_tensors(ss: SplatSet, p: torch.Tensor, q: torch.Tensor):
    """Splat tensors in the world for object pose ``(p, q)`` (differentiable in both)."""
    inv = transform_inverse(ss.reference)
    local_c = ss.centers @ inv[:3, :3].T + inv[:3, 3]
    local_u = ss.t_u @ inv[:3, :3].T
    local_v = ss.t_v @ inv[:3, :3].T
    R = _quat_to_matrix_t(q)
    return _t(local_c) @ R.T + p, _t(local_u) @ R.T, _t(local_v) @ R.T


def pose_render_loss(ss: SplatSet, cam: Camera, p, q, observed) -> tuple[float, np.ndarray, np.ndarray]:
    """Image loss of the object rendered at pose ``(p, q)`` and its gradients
    ``(loss, p_bar, q_bar)`` with respect to the position and raw quaternion."""
    observed = np.asarray(observed, dtype=float)
    if observed.shape != (cam.height, cam.width, 3):
        raise ValueError(f"observed image shape {observed.shape} does not match the camera")
    pt = _t(p).requires_grad_(True)
    qt = _t(q).requires_grad_(True)
    c, tu, tv = _posed_tensors(ss, pt, qt)
    img = _render_tensors(c, tu, tv, _t(ss.scales), _t(ss.opacity), _t(ss.colors), cam)
    loss = ((img - _t(observed)) ** 2).sum()
    loss.backward()
    return float(loss.detach()), pt.grad.numpy().copy(), qt.grad.numpy().copy()


def pose_gradient(ss: SplatSet, cam: Camera, p, q, observed) -> tuple[float, np.ndarray]:
    """Loss and its 6-vector gradient ``[d/dp, d/dθ]`` where ``θ`` is a
    world-frame rotation vector applied on top of ``q``."""
    loss, p_bar, q_bar = pose_render_loss(ss, cam, p, q, observed)
    rot = 0.5 * (_right(np.asarray(q, dtype=float)).T @ q_bar)[1:]
    return loss, np.concatenate([p_bar, rot])


def render_at_pose(ss: SplatSet, cam: Camera, p, q) -> np.ndarray:
    return render(transform_splats(ss, pose_to_transform(p, q)), cam)


# appearance fitting -----------------------------------------------------------


@dataclass
class FitConfig:
    iterations: int = 200
    lr: float = 0.05
    tol: float = 1e-12


def _logit(x):
    x = np.clip(x, 1e-6, 1 - 1e-6)
    return np.log(x) - np.log1p(-x)


def fit_appearance(images: Sequence, cams: Sequence[Camera], init: SplatSet, cfg: FitConfig | None = None) -> tuple[SplatSet, float]:
    """Fit opacity, colour and scales of ``init`` to views of a static object.

    Centres and tangent frames stay fixed.  Returns the fitted set and the
    final mean per-view loss.
    """
    cfg = cfg or FitConfig()
    if len(images) != len(cams):
        raise ValueError(f"got {len(images)} images for {len(cams)} cameras")
    if len(images) < 3:
        raise ValueError("appearance fitting needs at least three views")
    targets = []
    for im, cam in zip(images, cams):
        im = np.asarray(im, dtype=float)
        if im.shape != (cam.height, cam.width, 3):
            raise ValueError(f"image shape {im.shape} does not match its camera")
        targets.append(_t(im))
    c, tu, tv = _t(init.centers), _t(init.t_u), _t(init.t_v)
    z_op = _t(_logit(init.opacity)).requires_grad_(True)
    z_col = _t(_logit(init.colors)).requires_grad_(True)
    z_sc = _t(np.log(init.scales)).requires_grad_(True)
    opt = torch.optim.Adam([z_op, z_col, z_sc], lr=cfg.lr)

    def objective():
        op, col, sc = torch.sigmoid(z_op), torch.sigmoid(z_col), torch.exp(z_sc)
        total = 0.0
        for tgt, cam in zip(targets, cams):
            total = total + ((_render_tensors(c, tu, tv, sc, op, col, cam) - tgt) ** 2).sum()
        return total / len(targets)

    loss = objective()
    steps = 0
    for it in range(cfg.iterations):
        if not torch.isfinite(loss):
            raise FloatingPointError(f"appearance fit diverged at iteration {it}")
        if float(loss.detach()) <= cfg.tol:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps += 1
        loss = objective()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"appearance fit diverged at iteration {cfg.iterations}")
    if steps == 0:
        return init, float(loss.detach())
    with torch.no_grad():
        fitted = replace(
            init,
            opacity=torch.sigmoid(z_op).numpy().copy(),
            colors=torch.sigmoid(z_col).numpy().copy(),
            scales=torch.exp(z_sc).numpy().copy(),
        )
    return fitted, float(loss.detach())


# image I/O ----------------------------------------------------------------------


def ppm_bytes(img) -> bytes:
    """Encode an ``(H, W, 3)`` image in [0, 1] as binary 8-bit PPM (P6)."""
    a = np.asarray(img, dtype=float)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("PPM images must be (H, W, 3)")
    data = np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode() + data.tobytes()


def write_ppm(path: str | Path, img) -> None:
    Path(path).write_bytes(ppm_bytes(img))


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode())
        pos = end
    if tokens[0] != "P6":
        raise ValueError("only binary PPM (P6) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pix = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(float) / 255.0


def concat_splats(sets: Sequence[SplatSet]) -> SplatSet:
    """Merge splat sets already expressed in a common (world) frame."""
    if not sets:
        raise ValueError("nothing to merge")
    cat = lambda name: np.concatenate([getattr(s, name) for s in sets])
    return SplatSet(cat("centers"), cat("t_u"), cat("t_v"), cat("scales"), cat("opacity"), cat("colors"))
