"""Differentiable-physics training of vision-based quadrotor flight policies."""

__version__ = "0.1.0"

from .autodiff import DecayConfig, Tape, backward
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import DragParams, DynamicsParams, LatencyParams
from .geometry import Cuboid, Cylinder, EnvSpec, Plane, Sphere, World, closest_point, generate_env, ray_cast
from .policy import Policy, PolicySizes, load_checkpoint, save_checkpoint
from .render import CameraIntrinsics, preprocess, render_depth

__all__ = [
    "CameraIntrinsics", "ConfigError", "Cuboid", "Cylinder", "DecayConfig", "DragParams", "DynamicsParams",
    "EnvSpec", "ExperimentConfig", "LatencyParams", "Plane", "Policy", "PolicySizes", "Sphere", "Tape", "World",
    "backward", "closest_point", "generate_env", "load_checkpoint", "load_config", "preprocess", "ray_cast",
    "render_depth", "save_checkpoint",
]
