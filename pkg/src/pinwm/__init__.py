"""Differentiable rigid-body world models: contact dynamics, Gaussian-splat
rendering, parameter identification and digital-cousin ensembles."""

from .scene import PhysicsParams, Scene, SceneError, SimConfig, load_scene
from .dynamics import Trajectory, rollout, step

__all__ = ["PhysicsParams", "Scene", "SceneError", "SimConfig", "load_scene", "Trajectory", "rollout", "step"]
__version__ = "0.1.0"
