"""Convolutional-recurrent flight policy and its checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import GRAVITY

MAGIC = b"NWTF"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySizes:
    channels: tuple[int, int, int] = (32, 64, 128)
    kernels: tuple[int, int, int] = (2, 3, 3)
    hidden: int = 192
    image_shape: tuple[int, int] = (12, 16)

    @property
    def conv_out(self) -> tuple[int, int]:
        h, w = self.image_shape
        for k in self.kernels:
            h, w = h - k + 1, w - k + 1
        return h, w

    @property
    def flat_dim(self) -> int:
        h, w = self.conv_out
        return self.channels[-1] * h * w

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c_in = 1
        out: dict[str, tuple[int, ...]] = {}
        for i, (k, c) in enumerate(zip(self.kernels, self.channels), start=1):
            out[f"conv{i}_w"] = (k, k, c_in, c)
            out[f"conv{i}_b"] = (c,)
            c_in = c
        H = self.hidden
        out.update({
            "img_w": (self.flat_dim, H), "img_b": (H,),
            "vset_w": (3, H), "att_w": (6, H), "vel_w": (3, H),
            "gru_wx": (H, 3 * H), "gru_wh": (H, 3 * H), "gru_bx": (3 * H,), "gru_bh": (3 * H,),
            "head_w": (H, 6), "head_b": (6,),
        })
        return out


PRESETS = {
    "paper": PolicySizes((32, 64, 128), hidden=192),
    "desk": PolicySizes((8, 16, 16), hidden=64),
    "tiny": PolicySizes((2, 2, 2), hidden=16),
}


def sizes_for(preset: str) -> PolicySizes:
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown policy preset {preset!r}; choose from {sorted(PRESETS)}") from None


def init_params(rng, sizes: PolicySizes = PRESETS["paper"], scale: float = 1.0,
                hover_bias: float = GRAVITY, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in initialization.

    Conv kernels use He scaling (they feed LeakyReLU); linear maps use 1/fan_in variance.
    Biases start at zero except the vertical thrust bias, which is ``hover_bias``.
    The output head weights are shrunk by 0.01.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: dict[str, np.ndarray] = {}
    for name, shape in sizes.shapes().items():
        if name.endswith("_b") or name.startswith("gru_b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        gain = 2.0 if name.startswith("conv") else 1.0
        std = np.sqrt(gain / fan_in) * scale
        if name == "head_w":
            std *= 0.01
        params[name] = rng.standard_normal(shape) * std
    params["head_b"][2] = hover_bias
    return {k: v.astype(dtype) for k, v in params.items()}


def param_count(params) -> int:
    return int(sum(np.asarray(ad.val(v)).size for v in params.values()))


@dataclass
class Observation:
    """Batched policy inputs; vectors are expressed in the yaw-aligned frame."""

    image: np.ndarray        # (B, 12, 16) inverse depth
    target_velocity: np.ndarray  # (B, 3)
    attitude: np.ndarray     # (B, 6) body forward + up
    velocity: np.ndarray | None = None  # (B, 3) or None in odometry-free mode

    @property
    def batch(self) -> int:
        return self.image.shape[0]


class Policy:
    """CRNN: conv stack -> 192-d feature + projected auxiliary inputs -> GRU -> head.

    ``params`` may hold arrays or tape Nodes; the forward pass records on the tape
    when they are Nodes.
    """

    def __init__(self, sizes: PolicySizes = PRESETS["paper"], use_velocity: bool = True,
                 slope: float = 0.01):
        self.sizes = sizes
        self.use_velocity = use_velocity
        self.slope = slope

    def initial_state(self, batch: int, dtype=np.float32) -> np.ndarray:
        return np.zeros((batch, self.sizes.hidden), dtype=dtype)

    def check(self, params) -> None:
        want = self.sizes.shapes()
        for name, shape in want.items():
            if name not in params:
                raise ValueError(f"missing parameter {name}")
            if tuple(np.shape(ad.val(params[name]))) != shape:
                raise ValueError(f"parameter {name} has shape {np.shape(ad.val(params[name]))}, expected {shape}")

    def features(self, params, obs: Observation):
        img = np.asarray(obs.image)
        if img.shape[1:] != self.sizes.image_shape:
            raise ValueError(f"image shape {img.shape[1:]} != {self.sizes.image_shape}")
        dtype = ad.val(params["img_w"]).dtype
        x = img[..., None].astype(dtype, copy=False)
        for i in range(1, len(self.sizes.kernels) + 1):
            x = ad.leaky_relu(ad.conv2d(x, params[f"conv{i}_w"], params[f"conv{i}_b"]), self.slope)
        x = ad.reshape(x, (obs.batch, self.sizes.flat_dim))
        f = ad.affine(x, params["img_w"], params["img_b"])
        f = f + ad.matmul(np.asarray(obs.target_velocity, dtype=dtype), params["vset_w"])
        f = f + ad.matmul(np.asarray(obs.attitude, dtype=dtype), params["att_w"])
        if self.use_velocity:
            if obs.velocity is None:
                raise ValueError("velocity input required unless running odometry-free")
            f = f + ad.matmul(np.asarray(obs.velocity, dtype=dtype), params["vel_w"])
        return f

    def forward(self, params, obs: Observation, h):
        """Returns (u_desired, v_hat, h') with u_desired and v_hat in the yaw-aligned frame."""
        f = self.features(params, obs)
        h_new = ad.gru_cell(f, h, params["gru_wx"], params["gru_wh"], params["gru_bx"], params["gru_bh"])
        out = ad.affine(h_new, params["head_w"], params["head_b"])
        return out[:, 0:3], out[:, 3:6], h_new

    __call__ = forward


# ----------------------------------------------------------------------------- checkpoints

def save_checkpoint(params: dict, path) -> None:
    """Little-endian: magic, u32 version, u32 count; per tensor u32 name length, name,
    u32 rank, u64 dims, f32 data."""
    chunks = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(ad.val(value), dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | PolicySizes | None = None) -> dict:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not a newtonfly checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    if expected is not None:
        shapes = expected.shapes() if isinstance(expected, PolicySizes) else expected
        for name, shape in shapes.items():
            if name not in params:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(f"tensor {name}: shape {params[name].shape} != expected {tuple(shape)}")
    return params
