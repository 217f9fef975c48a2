"""U-Net, ResUNet and Dense R2UNet on one encoder/decoder skeleton.

Level ``i`` runs at ``base_width * 2**i`` channels.  Each encoder level is a
block followed by 2x2 max pooling; the bottleneck block runs at level
``depth``; each decoder level upsamples with a transposed conv, concatenates
the same-resolution encoder output and applies a block.  A 1x1 conv produces
the single logit map.
"""
from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nnops import EVAL, TRAIN, concat_channels, conv2d, conv_transpose2d, maxpool2d, sigmoid
from .r2blocks import BlockSpec, block_forward, block_param_shapes, count_params, init_params
from .tensorcore import DTYPE, ShapeError, Var, as_array, read_tensor, write_tensor

VARIANTS = ("unet", "resunet", "dense_r2unet")
_KIND = {"unet": "plain", "resunet": "residual", "dense_r2unet": "dense_r2"}

MAGIC = b"DR2UNET-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "dense_r2unet"
    depth: int = 4
    base_width: int = 16
    t: int = 2
    dropout_rate: float = 0.2
    input_size: tuple[int, int] = (256, 256)
    seed: int = 0
    n_units: int = 2
    dense_growth: int | None = None

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(self.input_size) != 2:
            raise ValueError("input_size is (h, w)")
        step = 2 ** self.depth
        for s in self.input_size:
            if s < step or s % step:
                raise ValueError(f"input size {self.input_size} not divisible by 2**depth = {step}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d


def block_specs(cfg: ModelConfig) -> dict[str, BlockSpec]:
    """Block specs keyed by parameter prefix, in forward order."""
    kind = _KIND[cfg.variant]
    # plain and ResUNet blocks carry no recurrence
    t = cfg.t if cfg.variant == "dense_r2unet" else 0

    def spec(c_in, c_out):
        return BlockSpec(kind, c_in, c_out, t=t, dropout_rate=cfg.dropout_rate,
                         dense_growth=cfg.dense_growth, n_units=cfg.n_units)

    widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
    specs = {}
    c = 1
    for i in range(cfg.depth):
        specs[f"enc{i}"] = spec(c, widths[i])
        c = widths[i]
    specs["bottleneck"] = spec(c, widths[cfg.depth])
    for i in reversed(range(cfg.depth)):
        specs[f"dec{i}"] = spec(2 * widths[i], widths[i])
    return specs


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
    specs = block_specs(cfg)
    shapes: dict[str, tuple[int, ...]] = {}
    for name, spec in specs.items():
        if name.startswith("dec"):
            i = int(name[3:])
            shapes[f"{name}.up.w"] = (widths[i + 1], widths[i], 3, 3)
            shapes[f"{name}.up.b"] = (widths[i],)
        shapes.update(block_param_shapes(spec, name))
    shapes["head.w"] = (1, cfg.base_width, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def count_params(self) -> int:
        return count_params(self.params)

    def forward(self, x, mode: str = EVAL, rng=None, params: Mapping | None = None) -> Var:
        return forward(self.config, self.params if params is None else params, x, mode, rng)

    def predict(self, x, mode: str = EVAL, rng=None) -> np.ndarray:
        return predict(self, x, mode, rng)


def build(config: ModelConfig) -> Model:
    config.validate()
    return Model(config, init_params(param_shapes(config), config.seed))


def forward(cfg: ModelConfig, params: Mapping, x, mode: str = EVAL, rng=None) -> Var:
    """Logit map of shape (n, 1, h, w)."""
    xv = as_array(x)
    if xv.ndim != 4 or xv.shape[1] != 1:
        raise ShapeError(f"expected (n, 1, h, w) input, got {xv.shape}")
    if tuple(xv.shape[2:]) != tuple(cfg.input_size):
        raise ShapeError(f"input spatial size {xv.shape[2:]} != configured {tuple(cfg.input_size)}")
    if mode == TRAIN and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    specs = block_specs(cfg)
    skips = []
    h = x
    for i in range(cfg.depth):
        name = f"enc{i}"
        h = block_forward(h, specs[name], params, mode, name, rng)
        skips.append(h)
        h, _ = maxpool2d(h)
    h = block_forward(h, specs["bottleneck"], params, mode, "bottleneck", rng)
    for i in reversed(range(cfg.depth)):
        name = f"dec{i}"
        up = conv_transpose2d(h, params[f"{name}.up.w"], params[f"{name}.up.b"])
        h = block_forward(concat_channels([skips[i], up]), specs[name], params, mode, name, rng)
    return conv2d(h, params["head.w"], params["head.b"], pad="valid")


def predict(model: Model, x, mode: str = EVAL, rng=None) -> np.ndarray:
    """Sigmoid probabilities, shape (n, 1, h, w)."""
    return sigmoid(as_array(model.forward(as_array(x), mode, rng))).value


# checkpoint: magic/version line, JSON config line, manifest, then binary tensors


def save(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + b" %d\n" % FORMAT_VERSION)
    buf.write(json.dumps(model.config.to_dict(), sort_keys=True).encode() + b"\n")
    buf.write(b"%d\n" % len(model.params))
    for name, arr in model.params.items():
        buf.write(f"{name} {' '.join(str(d) for d in arr.shape)}\n".encode())
    for arr in model.params.values():
        write_tensor(buf, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path) -> Model:
    with open(path, "rb") as fh:
        head = fh.readline()
        parts = head.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {head[:16]!r})")
        if int(parts[1]) != FORMAT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {int(parts[1])}, expected {FORMAT_VERSION}")
        try:
            cfg = ModelConfig(**json.loads(fh.readline()))
            count = int(fh.readline())
            manifest = []
            for _ in range(count):
                line = fh.readline().decode().split()
                manifest.append((line[0], tuple(int(d) for d in line[1:])))
            params = {}
            for name, shape in manifest:
                params[name] = read_tensor(fh).reshape(shape).astype(DTYPE)
        except (EOFError, ValueError, IndexError, UnicodeDecodeError, TypeError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    expected = param_shapes(cfg)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: parameter manifest does not match config")
    return Model(cfg, params)
