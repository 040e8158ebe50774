import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pinwm.scene import scene_from_json  # noqa: E402

FLOOR = {
    "name": "floor",
    "role": "static",
    "shape": {"type": "plane", "normal": [0.0, 0.0, 1.0], "offset": 0.0},
    "friction": 0.5,
    "restitution": 0.0,
}


def make_scene(bodies, params, sim=None, joints=()):
    doc = {"bodies": list(bodies), "params": list(params), "sim": sim or {}}
    if joints:
        doc["joints"] = list(joints)
    return scene_from_json(doc)


def cube_on_floor(z=0.5, half=0.5, mass=1.0, friction=0.5, restitution=0.0, v=(0, 0, 0), sim=None, floor=True):
    box = {
        "name": "cube",
        "role": "dynamic",
        "shape": {"type": "box", "half_extents": [half] * 3},
        "pose": {"p": [0.0, 0.0, z]},
        "twist": {"v": list(v)},
    }
    param = {"body": "cube", "mass": mass, "friction": friction, "restitution": restitution}
    return make_scene(([dict(FLOOR, friction=friction)] if floor else []) + [box], [param], sim)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
