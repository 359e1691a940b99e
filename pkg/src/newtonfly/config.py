"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dynamics import DragParams, DynamicsParams, LatencyParams
from .geometry import EnvSpec
from .objective import BarrierParams, LossWeights
from .render import CameraIntrinsics, NoiseModel

PRESET_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    kind: str = "random"  # "random" | "swap" | "empty"
    obstacle_count: tuple[int, int] = (4, 8)
    kind_weights: dict = field(default_factory=lambda: {"cylinder": 0.5, "sphere": 0.25, "cuboid": 0.25})
    sphere_radius: tuple[float, float] = (0.4, 1.0)
    cylinder_radius: tuple[float, float] = (0.2, 0.5)
    cylinder_height: tuple[float, float] = (3.0, 6.0)
    cuboid_half_extent: tuple[float, float] = (0.3, 1.0)
    arena_size: tuple[float, float, float] = (40.0, 40.0, 8.0)
    altitude: tuple[float, float] = (1.0, 2.5)
    goal_distance: tuple[float, float] = (20.0, 40.0)
    obstacle_band: tuple[float, float] = (0.0, 1.0)
    lateral_band: float = 0.0
    clearance: float = 1.0
    max_retries: int = 100
    swap_length: float = 20.0
    gate_width: float = 2.0

    def env_spec(self, seed: int = 0) -> EnvSpec:
        names = {f.name for f in dataclasses.fields(EnvSpec)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return EnvSpec(seed=seed, **kw)


@dataclass
class TrainConfig:
    envs: int = 64
    steps: int = 150
    dt: float = 1.0 / 15.0
    dt_jitter: float = 0.05
    lr: float = 1e-3
    schedule: str = "cosine"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    iterations: int = 50000
    alpha: float = 0.92
    decay_mode: str = "rate"
    decay_actuator: bool = True
    agents: int = 1
    agent_radius: float = 0.3
    v_max: tuple[float, float] = (3.0, 3.0)
    velocity_window: float = 2.0
    drag_randomization: float = 0.0
    divergence_factor: float = 1e3
    overflow_threshold: float = 1e8
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("envs", "steps", "iterations", "agents"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        for name in ("dt", "agent_radius", "velocity_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}: must be > 0")
        if not 0 <= self.dt_jitter < 1:
            raise ConfigError("train.dt_jitter: must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.alpha < 0:
            raise ConfigError("train: lr, weight_decay and alpha must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"train.schedule: unknown schedule {self.schedule!r}")
        if self.decay_mode not in ("rate", "factor"):
            raise ConfigError(f"train.decay_mode: unknown mode {self.decay_mode!r}")
        if self.v_max[0] <= 0 or self.v_max[0] > self.v_max[1]:
            raise ConfigError("train.v_max: need 0 < min <= max")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype: float32 or float64")


@dataclass
class LossConfig:
    velocity: float = 1.0
    collision: float = 2.0
    accel: float = 0.01
    jerk: float = 0.001
    aux_velocity: float = 0.1

    def weights(self) -> LossWeights:
        return LossWeights(self.velocity, self.collision, self.accel, self.jerk)


@dataclass
class BarrierConfig:
    beta1: float = 2.5
    beta2: float = 32.0
    drone_radius: float = 0.15
    barrier: str = "proximity"
    approach_scope: str = "sum"

    def params(self) -> BarrierParams:
        return BarrierParams(**dataclasses.asdict(self))


@dataclass
class DynamicsConfig:
    lam: float = 12.0
    tau: float = 1.0 / 15.0
    drag_quadratic: float = 0.06
    drag_linear: float = 0.1
    thrust_to_weight: float = 3.6
    gravity: float = 9.81
    clamp_sharpness: float = 2.0

    def params(self) -> DynamicsParams:
        return DynamicsParams(LatencyParams(self.lam, self.tau), DragParams(self.drag_quadratic, self.drag_linear),
                              self.thrust_to_weight, self.gravity, self.clamp_sharpness)


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 48
    hfov_deg: float = 87.0
    vfov_deg: float = 58.0
    min_depth: float = 0.3
    max_depth: float = 10.0
    pool: int = 4
    noise: bool = False
    noise_sigma: float = 0.02
    noise_dropout: float = 0.005

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.width, self.height, math.radians(self.hfov_deg), math.radians(self.vfov_deg),
                                self.min_depth, self.max_depth, self.pool)

    def noise_model(self) -> NoiseModel | None:
        return NoiseModel(self.noise_sigma, self.noise_dropout) if self.noise else None


@dataclass
class PolicyConfig:
    preset: str = "desk"
    use_velocity: bool = True
    init_scale: float = 1.0


@dataclass
class EvalConfig:
    steps: int = 300
    goal_radius: float = 1.2
    episodes: int = 50
    speeds: tuple[float, ...] = (3.0,)
    every: int = 0
    seed: int = 1_000_000


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    envs: int = 256
    minibatch: int = 38400
    epochs: int = 5
    iterations: int = 12500
    lr: float = 3e-4
    weight_decay: float = 0.01
    init_std: float = 0.5
    collision_penalty: float = 10.0
    max_grad_norm: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    name: str = "run"
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)

    def validate(self) -> None:
        self.train.validate()
        try:
            self.scene.env_spec().validate()
            self.dynamics.params()
            self.barrier.params()
            self.loss.weights()
            self.camera.intrinsics()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.scene.kind not in ("random", "swap", "empty"):
            raise ConfigError(f"scene.kind: unknown scene kind {self.scene.kind!r}")
        if self.scene.kind == "swap" and self.train.agents != 2:
            raise ConfigError("scene.kind swap requires train.agents = 2")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(value)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    raise ConfigError(f"{path}: unsupported field type {tp}")


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    prefix = f"{path}." if path else ""
    for key in data:
        if key not in fields:
            raise ConfigError(f"{prefix}{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _convert(hints[name], data[name], prefix + name)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{prefix}{name}: missing required field")
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists() and (PRESET_DIR / f"{path}.yaml").exists():
        path = PRESET_DIR / f"{path}.yaml"
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def config_from_mapping(data: dict) -> ExperimentConfig:
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
