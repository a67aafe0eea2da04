"""U-Net pixel classifier over channel-concatenated lighting stacks.

Parameter names follow ``<block>.<layer>.<weight|bias>`` with blocks
``enc0..enc{depth-1}``, ``bottleneck``, ``dec{depth-1}..dec0`` and ``head``;
layers inside a block are ``conv1, norm1, conv2, norm2``.  These names are
part of the checkpoint format and must stay stable.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import DataError
from .tensor import Tensor

MODES = ("spat32", "fullLight1")
CHANNELS_PER_IMAGE = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_images: int = 32
    channels_per_image: int = CHANNELS_PER_IMAGE
    hidden_features: int = 64
    depth: int = 3
    num_groups: int = 8
    height: int = 192
    width: int = 128
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.in_images not in (1, 32):
            raise ConfigError(f"in_images must be 1 or 32, got {self.in_images}")
        if self.hidden_features < 1:
            raise ConfigError("hidden_features must be >= 1")
        if not 1 <= self.depth <= 6:
            raise ConfigError(f"depth {self.depth} out of range")
        if self.hidden_features % self.num_groups:
            raise ConfigError(f"{self.hidden_features} features not divisible into {self.num_groups} groups")
        div = 2 ** self.depth
        if self.height % div or self.width % div:
            raise ConfigError(f"input {self.height}x{self.width} not divisible by 2^depth={div}")

    @property
    def in_channels(self) -> int:
        return self.in_images * self.channels_per_image

    @property
    def mode(self) -> str:
        return "spat32" if self.in_images == 32 else "fullLight1"

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "UNetConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        return cls(in_images=32 if mode == "spat32" else 1, **kw)


class UNetModel:
    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def save(self, path) -> None:
        """Write ``<path>`` (SPATW weights) and ``<path>.json`` (config) side by side."""
        path = Path(path)
        buf = io.BytesIO()
        T.save_params(self.params, buf)
        path.write_bytes(buf.getvalue())
        config_path(path).write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "UNetModel":
        path = Path(path)
        config = UNetConfig(**json.loads(config_path(path).read_text()))
        with open(path, "rb") as fh:
            params = T.load_params(fh)
        ref = _param_shapes(config)
        if list(params) != list(ref) or any(params[k].shape != s for k, s in ref.items()):
            raise ConfigError(f"checkpoint {path} does not match its config")
        return cls(config, params)


def config_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _block_shapes(name: str, cin: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{name}.conv1.weight": (hidden, cin, 3, 3),
        f"{name}.conv1.bias": (hidden,),
        f"{name}.norm1.weight": (hidden,),
        f"{name}.norm1.bias": (hidden,),
        f"{name}.conv2.weight": (hidden, hidden, 3, 3),
        f"{name}.conv2.bias": (hidden,),
        f"{name}.norm2.weight": (hidden,),
        f"{name}.norm2.bias": (hidden,),
    }


def _param_shapes(cfg: UNetConfig) -> dict[str, tuple[int, ...]]:
    f = cfg.hidden_features
    shapes: dict[str, tuple[int, ...]] = {}
    for level in range(cfg.depth):
        shapes.update(_block_shapes(f"enc{level}", cfg.in_channels if level == 0 else f, f))
    shapes.update(_block_shapes("bottleneck", f, f))
    for level in reversed(range(cfg.depth)):
        shapes.update(_block_shapes(f"dec{level}", 2 * f, f))
    shapes["head.weight"] = (1, f, 3, 3)
    shapes["head.bias"] = (1,)
    return shapes


def build(config: UNetConfig, seed: int = 0) -> UNetModel:
    """Fresh model: Kaiming-uniform conv weights, zero biases, unit GN scale."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".weight") and len(shape) == 4:
            fan_in = shape[1] * 9
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif ".norm" in name and name.endswith(".weight"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return UNetModel(config, params)


def _double_block(model: UNetModel, name: str, x: Tensor) -> Tensor:
    p = model.params
    g = model.config.num_groups
    eps = model.config.gn_eps
    for i in (1, 2):
        x = T.conv2d(x, p[f"{name}.conv{i}.weight"], p[f"{name}.conv{i}.bias"])
        x = T.group_norm(x, g, p[f"{name}.norm{i}.weight"], p[f"{name}.norm{i}.bias"], eps)
        x = T.relu(x)
    return x


def forward(model: UNetModel, x: Tensor) -> Tensor:
    """Return per-pixel wheal probabilities of shape [B, 1, H, W]."""
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected [B, {cfg.in_channels}, H, W] input, got {x.shape}")
    div = 2 ** cfg.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise T.ShapeError(f"spatial dims {x.shape[2:]} not divisible by {div}")
    skips = []
    for level in range(cfg.depth):
        x = _double_block(model, f"enc{level}", x)
        skips.append(x)
        x = T.maxpool2(x)
    x = _double_block(model, "bottleneck", x)
    for level in reversed(range(cfg.depth)):
        x = T.upsample_bilinear2(x)
        x = T.concat_channels([skips[level], x])
        x = _double_block(model, f"dec{level}", x)
    x = T.conv2d(x, model.params["head.weight"], model.params["head.bias"])
    return T.sigmoid(x)


def stack_to_array(stack, mode: str) -> np.ndarray:
    """Channel-concatenate a stack's images as uint8 [C, H, W].

    ``spat32`` orders blocks by image index 1..32; ``fullLight1`` uses the
    full-light image only.
    """
    if mode == "spat32":
        missing = [k for k in range(1, 33) if k not in stack.directional]
        if missing:
            raise DataError(f"stack {stack.case_id!r} is missing directional image index {missing[0]}")
        imgs = [stack.directional[k] for k in range(1, 33)]
    elif mode == "fullLight1":
        if stack.full_light is None:
            raise DataError(f"stack {stack.case_id!r} has no full-light image")
        imgs = [stack.full_light]
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return np.concatenate([np.moveaxis(im, -1, 0) for im in imgs], axis=0)


def stack_to_input(stack, mode: str) -> Tensor:
    """Model input [1, C, H, W] in (0, 1) at the stack's native resolution."""
    arr = stack_to_array(stack, mode).astype(np.float32) / 255.0
    return Tensor(arr[None])
