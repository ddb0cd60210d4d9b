"""Attention super-resolution network for heterogeneous precipitation pairs.

Topology: input conv, a ReLU conv backbone with a residual attention block
(channel then spatial gating) after every ``rab_every`` convs, 1x1 shrinkage
of every block output, fusion back to one channel plus the low-resolution
input, one-step upscaling, a post-upscale conv, centre crop/pad to the
target grid, then fusion with elevation and an interpolated copy of the
input and a short conv head.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import (Conv2DParams, ResampleSpec, conv2d, dense, pixel_shuffle, pool, resample,
                     transposed_conv2d)
from .tensor import Tensor, ShapeError, add, concat, mul, relu, reshape, sigmoid, window2d

UPSCALERS = ("shuffle", "bilinear", "bicubic", "deconv")


@dataclass
class ModelConfig:
    scale_factor: int = 5
    backbone_layers: int = 32
    filters: int = 64
    backbone_kernel: int = 3
    sab_kernel: int = 5
    shrink_kernel: int = 1
    shrink_filters: int = 16
    cab_mlp_nodes: int = 256
    cab_reduction: float = 0.5
    rab_every: int = 2
    head_layers: int = 3
    head_filters: int | None = None
    target_shape: tuple[int, int] = (66, 41)
    upscale: str = "shuffle"
    use_topography: bool = True

    def __post_init__(self):
        self.target_shape = tuple(int(v) for v in self.target_shape)
        self.validate()

    def validate(self) -> None:
        if self.scale_factor < 1:
            raise ValueError("scale_factor must be >= 1")
        if self.rab_every < 1 or self.backbone_layers < self.rab_every or self.backbone_layers % self.rab_every:
            raise ValueError(f"backbone_layers={self.backbone_layers} must be a positive multiple of rab_every={self.rab_every}")
        for k in (self.backbone_kernel, self.sab_kernel, self.shrink_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if self.filters < 1 or self.shrink_filters < 1 or self.cab_mlp_nodes < 1:
            raise ValueError("layer widths must be positive")
        if not 0 < self.cab_reduction <= 1:
            raise ValueError("cab_reduction must lie in (0, 1]")
        if self.head_layers < 1:
            raise ValueError("head_layers must be >= 1")
        if self.upscale not in UPSCALERS:
            raise ValueError(f"upscale must be one of {UPSCALERS}")
        if len(self.target_shape) != 2 or min(self.target_shape) < 1:
            raise ValueError(f"bad target_shape {self.target_shape}")

    @property
    def n_rab(self) -> int:
        return self.backbone_layers // self.rab_every

    @property
    def head_width(self) -> int:
        return self.head_filters or self.filters

    @property
    def cab_widths(self) -> tuple[int, int, int]:
        return (self.cab_mlp_nodes, max(1, int(round(self.cab_mlp_nodes * self.cab_reduction))), self.filters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_shape"] = list(self.target_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class AttentionSRModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def conv(self, name: str, stride: int = 1) -> Conv2DParams:
        return Conv2DParams(self.params[f"{name}.kernel"], self.params[f"{name}.bias"], stride)

    def block(self, prefix: str) -> dict[str, Tensor]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float32)

    def __call__(self, x_lr: Tensor, elevation_hr: Tensor | None = None) -> Tensor:
        return forward(self, x_lr, elevation_hr)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    k, f = cfg.backbone_kernel, cfg.filters
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, kh, ci, co):
        shapes.append((f"{name}.kernel", (kh, kh, ci, co)))
        shapes.append((f"{name}.bias", (co,)))

    conv("input", k, 1, f)
    for i in range(cfg.backbone_layers):
        conv(f"backbone.{i}", k, f, f)
    w0, w1, w2 = cfg.cab_widths
    for j in range(cfg.n_rab):
        prev = f
        for li, width in enumerate((w0, w1, w2)):
            shapes.append((f"rab.{j}.cab.w{li}", (prev, width)))
            shapes.append((f"rab.{j}.cab.b{li}", (width,)))
            prev = width
        conv(f"rab.{j}.sab", cfg.sab_kernel, 2, 1)
        conv(f"shrink.{j}", cfg.shrink_kernel, f, cfg.shrink_filters)
    conv("fusion1", k, cfg.shrink_filters * cfg.n_rab, f)
    conv("to_residual", k, f, 1)
    r = cfg.scale_factor
    if cfg.upscale == "shuffle":
        conv("pre_shuffle", k, 1, r * r)
    elif cfg.upscale == "deconv":
        conv("deconv", 3, 1, 1)
    conv("post_upscale", k, 1, 1)
    hw = cfg.head_width
    conv("fusion2", k, 3 if cfg.use_topography else 2, hw)
    for i in range(cfg.head_layers):
        conv(f"head.{i}", k, hw, 1 if i == cfg.head_layers - 1 else hw)
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> AttentionSRModel:
    """Allocate parameters with He-uniform weights and zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config):
        if name.endswith("bias") or ".cab.b" in name:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return AttentionSRModel(config, params)


# --- attention blocks ------------------------------------------------------

def _mlp(v: Tensor, w: dict[str, Tensor]) -> Tensor:
    h = relu(dense(v, w["cab.w0"], w["cab.b0"]))
    h = relu(dense(h, w["cab.w1"], w["cab.b1"]))
    return dense(h, w["cab.w2"], w["cab.b2"])


def cab_forward(F: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Channel gate [n,1,1,c] from a shared MLP over global max and mean pools."""
    n, _, _, c = F.shape
    if weights["cab.w0"].shape[0] != c or weights["cab.w2"].shape[1] != c:
        raise ShapeError(f"channel attention expects {weights['cab.w0'].shape[0]} channels, got {c}")
    mx = reshape(pool("global_max", F), (n, c))
    av = reshape(pool("global_avg", F), (n, c))
    return reshape(sigmoid(add(_mlp(mx, weights), _mlp(av, weights))), (n, 1, 1, c))


def sab_forward(F: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Spatial gate [n,h,w,1] from a conv over channel-wise max and mean maps."""
    pooled = concat([pool("channel_max", F), pool("channel_avg", F)], axis=3)
    return sigmoid(conv2d(pooled, Conv2DParams(weights["sab.kernel"], weights["sab.bias"])))


def rab_forward(F: Tensor, weights: dict[str, Tensor], branch_scale: float | None = None) -> Tensor:
    """F + M_s * (M_c * F). ``branch_scale`` multiplies the gated branch (test hook)."""
    refined = mul(F, cab_forward(F, weights))
    gated = mul(refined, sab_forward(refined, weights))
    if branch_scale is not None:
        gated = mul(gated, Tensor(branch_scale))
    return add(F, gated)


# --- full network ----------------------------------------------------------

def center_window(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Centre crop or zero-pad the spatial extents of an NHWC tensor."""
    H, W = target
    top = (x.shape[1] - H) // 2
    left = (x.shape[2] - W) // 2
    if top == 0 and left == 0 and x.shape[1:3] == (H, W):
        return x
    return window2d(x, top, left, H, W)


def forward(model: AttentionSRModel, x_lr: Tensor, elevation_hr: Tensor | None = None) -> Tensor:
    """Downscale a log1p-space low-resolution batch [n,h,w,1] to [n,H_out,W_out,1]."""
    cfg = model.config
    if x_lr.ndim != 4 or x_lr.shape[3] != 1:
        raise ShapeError(f"x_lr must be [n,h,w,1], got {x_lr.shape}")
    n = x_lr.shape[0]
    H, W = cfg.target_shape
    if cfg.use_topography:
        if elevation_hr is None:
            raise ShapeError("model configured with topography needs elevation_hr")
        if elevation_hr.shape not in ((1, H, W, 1), (n, H, W, 1)):
            raise ShapeError(f"elevation must be [1,{H},{W},1], got {elevation_hr.shape}")

    f = relu(conv2d(x_lr, model.conv("input")))
    taps = []
    j = 0
    for i in range(cfg.backbone_layers):
        f = relu(conv2d(f, model.conv(f"backbone.{i}")))
        if (i + 1) % cfg.rab_every == 0:
            f = rab_forward(f, model.block(f"rab.{j}"))
            taps.append(relu(conv2d(f, model.conv(f"shrink.{j}"))))
            j += 1
    fused = relu(conv2d(concat(taps, axis=3), model.conv("fusion1")))
    local = add(conv2d(fused, model.conv("to_residual")), x_lr)

    r = cfg.scale_factor
    if cfg.upscale == "shuffle":
        up = pixel_shuffle(conv2d(local, model.conv("pre_shuffle")), r)
    elif cfg.upscale == "deconv":
        up = transposed_conv2d(local, model.conv("deconv"), r)
    else:
        up = resample(local, ResampleSpec(cfg.upscale, r))
    up = center_window(conv2d(up, model.conv("post_upscale")), (H, W))

    interp = center_window(resample(x_lr, ResampleSpec("bilinear", r)), (H, W))
    channels = [up, interp]
    if cfg.use_topography:
        elev = elevation_hr
        if elev.shape[0] != n:
            elev = Tensor(np.broadcast_to(elev.data, (n, H, W, 1)))
        channels.append(elev)
    h = relu(conv2d(concat(channels, axis=3), model.conv("fusion2")))
    for i in range(cfg.head_layers):
        h = conv2d(h, model.conv(f"head.{i}"))
        if i < cfg.head_layers - 1:
            h = relu(h)
    return h


# --- checkpoint ------------------------------------------------------------

MAGIC = b"ASRW"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: AttentionSRModel) -> bytes:
    """Serialize config and parameters.

    Layout (little-endian): magic, u32 version, u32 config-json length,
    config json, 32-byte sha256 of that json, u32 block count, then per block
    u16 name length, name, u8 rank, u32 extents, float32 payload.
    """
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(cfg_json)))
    buf.write(cfg_json)
    buf.write(hashlib.sha256(cfg_json).digest())
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> AttentionSRModel:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte offset {pos} (needed {n} more bytes)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_json = bytes(take(cfg_len))
    if bytes(take(32)) != hashlib.sha256(cfg_json).digest():
        raise CheckpointError("config digest mismatch")
    config = ModelConfig.from_dict(json.loads(cfg_json))
    model = build_model(config, seed=0)
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    if set(arrays) != set(model.params):
        raise CheckpointError("parameter names do not match config")
    model.load_arrays(arrays)
    return model


def save_checkpoint(model: AttentionSRModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> AttentionSRModel:
    return model_from_bytes(Path(path).read_bytes())
