"""Command-line interface.

Exit codes: 0 success, 1 a check failed, 2 bad usage or invalid input,
3 numerical failure (solver or identification).  Every subcommand is
deterministic for a given ``--seed``; files are written atomically.
``PINWM_THREADS`` caps the worker threads used for independent rollouts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .lcp import LcpError
from .scene import PhysicsParams, Scene, SceneError, load_scene, scene_from_json

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
BUNDLED = ("push", "flip", "bounce", "impact")
MAX_RES = 512


class UsageError(ValueError):
    pass


# helpers -------------------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("PINWM_THREADS")
    if raw is None:
        return max(1, min(os.cpu_count() or 1, 8))
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PINWM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("PINWM_THREADS must be at least 1")
    return n


def _data(name: str) -> Path:
    return Path(str(resources.files("pinwm") / "data" / name))


def _scene(arg: str) -> Scene:
    if arg in BUNDLED and not Path(arg).exists():
        return load_scene(_data(f"{arg}.json"))
    return load_scene(arg)


def _actions(arg: str | None, scene_arg: str) -> np.ndarray:
    if arg is None:
        name = scene_arg if scene_arg in BUNDLED else None
        path = _data(f"{name}_actions.json") if name in ("push", "bounce") else _data("push_actions.json")
    else:
        path = Path(arg)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read actions from {path}: {exc}") from exc
    acts = doc["actions"] if isinstance(doc, dict) else doc
    arr = np.array(acts, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3 or not np.isfinite(arr).all():
        raise UsageError("actions must be a list of finite 3-vectors")
    return arr


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _params_from_report(scene: Scene, path: str) -> PhysicsParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from exc
    entries = doc.get("final") if isinstance(doc, dict) else None
    if entries is None:
        raise UsageError(f"{path} has no 'final' parameter list")
    sdoc = scene.to_json()
    sdoc["params"] = entries
    return scene_from_json(sdoc).params


def _apply_inits(params: PhysicsParams, slot: int, inits) -> PhysicsParams:
    for item in inits or []:
        if "=" not in item:
            raise UsageError(f"--init expects group=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in PhysicsParams.GROUPS:
            raise UsageError(f"--init: unknown group {key!r}")
        arr = params.group(key).copy()
        vals = [float(v) for v in val.split(",")]
        arr[slot] = vals if key == "inertia" and len(vals) == 3 else vals[0]
        params = params.with_group(key, arr)
    params.validate()
    return params


def _body(scene: Scene, name: str | None) -> int:
    if name is None:
        if not scene.dynamic_indices:
            raise UsageError("scene has no dynamic body")
        return scene.dynamic_indices[0]
    try:
        i = scene.body_index(name)
    except KeyError:
        raise UsageError(f"no body named {name!r}") from None
    if not scene.bodies[i].is_dynamic:
        raise UsageError(f"body {name!r} is not dynamic")
    return i


def _default_camera(scene: Scene, body: int, size: int):
    from .splats import look_at

    p = np.array(scene.bodies[body].position, dtype=float)
    return look_at(p + [0.05, -0.3, 0.3], p + [0.05, 0.0, 0.0], size=size)


def _camera(arg: str | None, scene: Scene, body: int, size: int):
    from .splats import Camera

    if arg is None:
        return _default_camera(scene, body, size)
    try:
        return Camera.from_json(json.loads(Path(arg).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read camera {arg}: {exc}") from exc


def _check_size(size: int) -> None:
    if not 1 <= size <= MAX_RES:
        raise UsageError(f"--size must be between 1 and {MAX_RES}")


# subcommands -----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .dynamics import rollout

    scene = _scene(args.scene)
    if args.H is not None or args.h is not None:
        scene = scene.with_sim(H=args.H or scene.sim.H, h=args.h or scene.sim.h)
    acts = _actions(args.actions, args.scene)
    traj = rollout(scene, scene.initial_state(), acts)
    out = Path(args.out)
    _write(out / "trajectory.jsonl", traj.to_jsonl())
    if args.render:
        from .splats import concat_splats, init_splats_on_surface, ppm_bytes, render, transform_splats
        from .so3 import pose_to_transform

        _check_size(args.size)
        movers = [i for i, b in enumerate(scene.bodies) if b.role != "static"]
        rng = np.random.default_rng(args.seed)
        local = {}
        for i in movers:
            ss = init_splats_on_surface(scene.bodies[i].shape, args.splats, seed=args.seed + i)
            local[i] = replace(ss, colors=np.tile(rng.uniform(0.2, 1.0, 3), (len(ss), 1)))
        cam = _camera(args.camera, scene, _body(scene, None) if scene.dynamic_indices else movers[0], args.size)
        # splats and camera are saved so that image-mode identify can reuse them
        for i in movers:
            _write(out / f"splats_{scene.bodies[i].name}.json", _dump(local[i].to_json()))
        _write(out / "camera.json", _dump(cam.to_json()))
        for t, s in enumerate(traj.states):
            world = concat_splats([transform_splats(local[i], pose_to_transform(s[i, 0:3], s[i, 3:7])) for i in movers])
            _write(out / f"frame_{t:04d}.ppm", ppm_bytes(render(world, cam)))
    print(f"wrote {len(traj.states)} states to {out / 'trajectory.jsonl'}")
    return EXIT_OK


def cmd_identify(args) -> int:
    from .dynamics import Trajectory
    from .sysid import IMAGE, POSE, IdentConfig, ObservationSeq, identify

    scene = _scene(args.scene)
    free = tuple(g for g in (args.free or "").split(",") if g)
    if not free:
        raise UsageError("--free must name at least one parameter group")
    cfg = IdentConfig(free=free, lr=args.lr, max_iter=args.iters, seed=args.seed)
    cfg.validate()
    body = _body(scene, args.body)
    try:
        traj = Trajectory.load(args.obs)
    except OSError as exc:
        raise UsageError(f"cannot read observations {args.obs}: {exc}") from exc
    if len(traj.states[0]) != len(scene.bodies):
        raise UsageError("observation trajectory does not match the scene's bodies")
    scene = scene.with_sim(H=traj.H, h=traj.h)
    obs = ObservationSeq.from_trajectory(traj, body)
    splats = None
    if args.mode == IMAGE:
        from .splats import SplatSet, read_ppm

        if args.frames is None or args.splats is None:
            raise UsageError("image mode needs --frames and --splats")
        cam = _camera(args.camera, scene, body, args.size)
        frames = [Path(args.frames) / f"frame_{t:04d}.ppm" for t in range(1, len(traj.states))]
        missing = [str(f) for f in frames if not f.exists()]
        if missing:
            raise UsageError(f"missing frames: {missing[:3]}")
        splats = SplatSet.load(args.splats)
        obs = ObservationSeq(IMAGE, obs.actions, obs.H, obs.h, body, images=[read_ppm(f) for f in frames], camera=cam, state0=obs.state0)
    elif args.mode != POSE:
        raise UsageError(f"--mode must be pose or image, got {args.mode!r}")
    obs.validate()
    theta0 = _apply_inits(scene.params.copy(), scene.dynamic_slot(body), args.init)
    res = identify(scene, theta0, obs, splats, cfg)
    names = [scene.bodies[i].name for i in scene.dynamic_indices]
    _write(Path(args.out), _dump(res.to_json(names, timing=False)))
    for g in free:
        print(f"{g}: {np.asarray(res.theta_star.group(g)).tolist()}")
    print(f"loss {min(res.loss_history):.6e} after {res.iterations} iterations ({res.wall_time:.1f} s)")
    return EXIT_OK


def cmd_cousins(args) -> int:
    from .cousins import CousinConfig, manifest, sample_cousin

    scene = _scene(args.scene)
    theta = _params_from_report(scene, args.report)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    cfg = CousinConfig(delta=args.delta, seed=args.seed)
    cfg.validate()
    splats = None
    if args.splats is not None:
        from .splats import SplatSet

        splats = SplatSet.load(args.splats)
    with ThreadPoolExecutor(_threads()) as pool:
        cousins = list(pool.map(lambda i: sample_cousin(theta, splats, cfg, i), range(args.count)))
    out = Path(args.out)
    for c in cousins:
        _write(out / f"cousin_{c.cousin_id:04d}.json", _dump(scene.with_params(c.params).to_json()))
        if c.splats is not None:
            _write(out / f"cousin_{c.cousin_id:04d}_splats.json", json.dumps(c.splats.to_json()) + "\n")
    _write(out / "manifest.json", _dump(manifest(cousins, scene, cfg)))
    print(f"wrote {len(cousins)} cousins to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .dynamics import rollout
    from .oracles import gradcheck
    from .sysid import ObservationSeq, trajectory_loss

    scene = _scene(args.scene)
    acts = _actions(args.actions, args.scene)[: args.steps]
    body = _body(scene, args.body)
    obs = ObservationSeq.from_trajectory(rollout(scene, scene.initial_state(), acts), body)
    rng = np.random.default_rng(args.seed)
    z0 = scene.params.encode()
    z = {g: z0[g] + args.perturb * rng.standard_normal(z0[g].shape) for g in PhysicsParams.GROUPS}
    shapes = {g: z[g].shape for g in PhysicsParams.GROUPS}

    def unflat(vec):
        out, k = {}, 0
        for g in PhysicsParams.GROUPS:
            n = int(np.prod(shapes[g]))
            out[g] = vec[k : k + n].reshape(shapes[g])
            k += n
        return out

    flat = np.concatenate([z[g].ravel() for g in PhysicsParams.GROUPS])
    loss_fn = lambda v: trajectory_loss(scene, PhysicsParams.decode(unflat(v)), obs, grad=False)[0]
    _, grads, _ = trajectory_loss(scene, PhysicsParams.decode(z), obs)
    jac = PhysicsParams.decode_jacobian(z)
    analytic = np.concatenate([(grads[g] * jac[g]).ravel() for g in PhysicsParams.GROUPS])
    names = []
    for g in PhysicsParams.GROUPS:
        for idx in np.ndindex(shapes[g]):
            names.append(g + "".join(f"[{i}]" for i in idx))
    rep = gradcheck(loss_fn, analytic, flat, names, eps_rel=args.eps, tol=args.tol, noise=args.noise, loss_noise=args.loss_noise)
    _write(Path(args.out), _dump(rep.to_json()))
    print(rep.table())
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_metrics(args) -> int:
    from .sysid import one_step_gap, push_sampler

    scene = _scene(args.scene)
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    theta_b = scene.params
    theta_a = _params_from_report(scene, args.report) if args.report else theta_b
    if args.other:
        theta_b = _params_from_report(scene, args.other)
    body = _body(scene, args.body)
    sampler = push_sampler(scene, body)
    rng = np.random.default_rng(args.seed)
    samples = [sampler(rng) for _ in range(args.k)]
    with ThreadPoolExecutor(_threads()) as pool:
        rows = list(pool.map(lambda sa: one_step_gap(theta_a, theta_b, scene, sa[0], sa[1], body), samples))
    arr = np.array(rows)
    lines = ["sample,trans_err,rot_err"]
    lines += [f"{i},{r[0]:.17g},{r[1]:.17g}" for i, r in enumerate(arr)]
    lines.append(f"mean,{arr[:, 0].mean():.17g},{arr[:, 1].mean():.17g}")
    _write(Path(args.out), "\n".join(lines) + "\n")
    print(f"one-step error over {args.k} actions: {arr[:, 0].mean():.3e} m, {arr[:, 1].mean():.3e} rad")
    return EXIT_OK


# parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pinwm", description="Differentiable rigid-body world models.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene_default="push"):
        sp.add_argument("--scene", default=scene_default, help=f"scene file or bundled name {BUNDLED} (default: %(default)s)")
        sp.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")

    s = sub.add_parser("simulate", help="roll out a scene under end-effector actions")
    common(s)
    s.add_argument("--actions", help="JSON actions file (default: the bundled actions)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--H", type=float, help="action duration override (s)")
    s.add_argument("--h", type=float, help="substep override (s)")
    s.add_argument("--render", action="store_true", help="also write frame_NNNN.ppm images")
    s.add_argument("--size", type=int, default=64, help="render resolution in pixels (default: %(default)s)")
    s.add_argument("--splats", type=int, default=200, help="splats per rendered body (default: %(default)s)")
    s.add_argument("--camera", help="camera JSON (default: a view of the first dynamic body)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", help="identify physical parameters from observations")
    common(s)
    s.add_argument("--obs", required=True, help="observed trajectory (pinwm-traj/1 JSONL)")
    s.add_argument("--free", default="", help="comma-separated groups to fit: mass,inertia,restitution,friction")
    s.add_argument("--mode", default="pose", help="pose or image (default: %(default)s)")
    s.add_argument("--init", action="append", help="initial value, e.g. friction=0.06 (repeatable)")
    s.add_argument("--body", help="name of the observed body (default: first dynamic body)")
    s.add_argument("--iters", type=int, default=500, help="maximum iterations (default: %(default)s)")
    s.add_argument("--lr", type=float, default=0.01, help="Adam learning rate (default: %(default)s)")
    s.add_argument("--frames", help="image mode: directory holding frame_NNNN.ppm")
    s.add_argument("--splats", help="image mode: splat set JSON of the observed body")
    s.add_argument("--camera", help="image mode: camera JSON")
    s.add_argument("--size", type=int, default=64, help="image mode: default camera resolution (default: %(default)s)")
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("cousins", help="sample perturbed cousins of identified parameters")
    common(s)
    s.add_argument("--report", required=True, help="identification report JSON")
    s.add_argument("--delta", type=float, default=0.1, help="relative perturbation (default: %(default)s)")
    s.add_argument("--count", type=int, default=32, help="number of cousins (default: %(default)s)")
    s.add_argument("--splats", help="splat set JSON whose colours are perturbed too")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_cousins)

    s = sub.add_parser("gradcheck", help="compare rollout gradients with finite differences")
    common(s)
    s.add_argument("--actions", help="JSON actions file (default: the bundled actions)")
    s.add_argument("--steps", type=int, default=8, help="number of actions to roll out (default: %(default)s)")
    s.add_argument("--body", help="observed body (default: first dynamic body)")
    s.add_argument("--perturb", type=float, default=0.2, help="std of the encoded-parameter offset (default: %(default)s)")
    s.add_argument("--eps", type=float, default=1e-5, help="relative FD step (default: %(default)s)")
    s.add_argument("--tol", type=float, default=1e-3, help="relative error tolerance (default: %(default)s)")
    s.add_argument("--noise", type=float, default=1e-7, help="noise floor relative to the largest FD component (default: %(default)s)")
    s.add_argument("--loss-noise", type=float, default=1e-10, help="absolute reproducibility of the loss (default: %(default)s)")
    s.add_argument("--out", required=True, help="report JSON path")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("metrics", help="one-step error between two parameter sets")
    common(s)
    s.add_argument("--report", help="report whose final parameters are compared (default: the scene's)")
    s.add_argument("--other", help="report to compare against (default: the scene's parameters)")
    s.add_argument("--body", help="measured body (default: first dynamic body)")
    s.add_argument("--k", type=int, default=100, help="number of sampled actions (default: %(default)s)")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    from .sysid import IdentError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        n = _threads()
        import torch

        torch.set_num_threads(n)
        return args.func(args)
    except (LcpError, IdentError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneError, UsageError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
