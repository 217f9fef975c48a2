"""Recurrent convolutional layers, residual units and the dense recurrent block.

A block is described by a :class:`BlockSpec`; its parameters live in a flat
``name -> array`` mapping produced by :func:`block_param_shapes` /
:func:`init_block`, so a whole network can keep a single ordered store.

Block kinds:

* ``plain``     two conv+ReLU layers (U-Net)
* ``recurrent`` two stacked RCLs, no shortcut
* ``residual``  shortcut + two stacked RCLs; with ``t == 0`` the RCLs carry no
  recurrent kernel and this is the ResUNet unit
* ``dense_r2``  shortcut + a dense chain of RCLs closed by a 1x1 compression
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import nnops
from .nnops import EVAL, add, concat_channels, conv2d, relu, spatial_dropout
from .tensorcore import DTYPE, ShapeError, Var, as_array, he_init

KINDS = ("plain", "recurrent", "residual", "dense_r2")


@dataclass
class RCLParams:
    """Feedforward kernel, recurrent kernel (None when t == 0), bias and unroll count."""

    w_f: object
    b: object
    w_r: object = None
    t: int = 2

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if self.t > 0 and self.w_r is None:
            raise ValueError("t > 0 needs a recurrent kernel")
        if self.w_r is not None:
            c_out = as_array(self.w_f).shape[0]
            if as_array(self.w_r).shape[:2] != (c_out, c_out):
                raise ShapeError(f"recurrent kernel must map {c_out} -> {c_out} channels")


@dataclass
class ConvParams:
    w: object
    b: object


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    c_in: int
    c_out: int
    t: int = 2
    dropout_rate: float = 0.0
    dense_growth: int | None = None
    n_units: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be >= 1")
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")
        if self.kind == "plain" and self.t != 0:
            object.__setattr__(self, "t", 0)

    @property
    def growth(self) -> int:
        if self.dense_growth is not None:
            return self.dense_growth
        return max(1, self.c_out // 2)


def rcl_forward(x, p: RCLParams, mode: str = EVAL) -> Var:
    """Unrolled recurrent conv layer.

    y(0) = conv(x, w_f) + b;  y(s) = conv(x, w_f) + b + conv(relu(y(s-1)), w_r)
    for s = 1..t, and the layer emits relu(y(t)).
    """
    nnops._check_mode(mode)
    feed = conv2d(x, p.w_f, p.b)
    y = feed
    for _ in range(p.t):
        y = add(feed, conv2d(relu(y), p.w_r))
    return relu(y)


def _unit_stack(x, units, mode):
    h = x
    for u in units:
        h = rcl_forward(h, u, mode)
    return h


def dense_rcl_forward(x, units, compress: ConvParams, mode: str = EVAL) -> Var:
    """Dense chain: unit k sees concat(x, out_1, ..., out_{k-1}); a 1x1 conv
    compresses concat(x, out_1, ..., out_U) to the block width."""
    if not units:
        raise ValueError("dense chain needs at least one unit")
    feats = [x]
    for u in units:
        inp = feats[0] if len(feats) == 1 else concat_channels(feats)
        feats.append(rcl_forward(inp, u, mode))
    return conv2d(concat_channels(feats), compress.w, compress.b, pad="valid")


def _project(x, params, prefix, spec):
    if spec.c_in == spec.c_out:
        return x
    return conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"], pad="valid")


def unit_params(params: Mapping, prefix: str, spec: BlockSpec) -> list[RCLParams]:
    units = []
    for k in range(spec.n_units):
        base = f"{prefix}.unit{k}"
        w_r = params.get(f"{base}.w_r") if spec.t > 0 else None
        units.append(RCLParams(params[f"{base}.w_f"], params[f"{base}.b"], w_r, spec.t))
    return units


def r2_forward(x, spec: BlockSpec, params: Mapping, mode: str = EVAL, prefix: str = "block") -> Var:
    """Residual unit: project(x) + F(x), F being the RCL stack or dense chain."""
    if spec.kind not in ("residual", "dense_r2"):
        raise ValueError(f"r2_forward handles residual/dense_r2 blocks, not {spec.kind!r}")
    units = unit_params(params, prefix, spec)
    if spec.kind == "residual":
        branch = _unit_stack(x, units, mode)
    else:
        compress = ConvParams(params[f"{prefix}.compress.w"], params[f"{prefix}.compress.b"])
        branch = dense_rcl_forward(x, units, compress, mode)
    return add(_project(x, params, prefix, spec), branch)


def block_forward(x, spec: BlockSpec, params: Mapping, mode: str = EVAL, prefix: str = "block", rng=None) -> Var:
    """Any block kind, followed by the tail spatial dropout."""
    xv = as_array(x)
    if xv.shape[1] != spec.c_in:
        raise ShapeError(f"{prefix}: expected {spec.c_in} input channels, got {xv.shape[1]}")
    if spec.kind in ("residual", "dense_r2"):
        out = r2_forward(x, spec, params, mode, prefix)
    else:
        out = _unit_stack(x, unit_params(params, prefix, spec), mode)
    return spatial_dropout(out, spec.dropout_rate, mode, rng)


def dense_r2_block(x, spec: BlockSpec, params: Mapping, mode: str = EVAL, prefix: str = "block", rng=None) -> Var:
    if spec.kind != "dense_r2":
        raise ValueError("dense_r2_block needs a dense_r2 spec")
    return block_forward(x, spec, params, mode, prefix, rng)


def block_param_shapes(spec: BlockSpec, prefix: str = "block") -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for one block."""
    shapes: dict[str, tuple[int, ...]] = {}
    dense = spec.kind == "dense_r2"
    c_unit_out = spec.growth if dense else spec.c_out
    c = spec.c_in
    for k in range(spec.n_units):
        base = f"{prefix}.unit{k}"
        shapes[f"{base}.w_f"] = (c_unit_out, c, 3, 3)
        if spec.t > 0:
            shapes[f"{base}.w_r"] = (c_unit_out, c_unit_out, 3, 3)
        shapes[f"{base}.b"] = (c_unit_out,)
        c = c + c_unit_out if dense else c_unit_out
    if dense:
        shapes[f"{prefix}.compress.w"] = (spec.c_out, c, 1, 1)
        shapes[f"{prefix}.compress.b"] = (spec.c_out,)
    if spec.kind in ("residual", "dense_r2") and spec.c_in != spec.c_out:
        shapes[f"{prefix}.proj.w"] = (spec.c_out, spec.c_in, 1, 1)
        shapes[f"{prefix}.proj.b"] = (spec.c_out,)
    return shapes


def init_params(shapes: Mapping[str, tuple[int, ...]], rng) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases, drawn in name order from one generator."""
    rng = np.random.default_rng(rng)
    out = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            out[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            if name.endswith(".up.w"):
                # transposed kernels are (c_in, c_out, k, k); each output pixel sees c_in taps
                fan_in = shape[0] * shape[2] * shape[3]
            out[name] = he_init(shape, fan_in, rng)
    return out


def init_block(spec: BlockSpec, seed=0, prefix: str = "block") -> dict[str, np.ndarray]:
    return init_params(block_param_shapes(spec, prefix), seed)


def count_params(obj) -> int:
    """Learnable scalars in a BlockSpec, a parameter mapping, or a Model."""
    if isinstance(obj, BlockSpec):
        return sum(int(np.prod(s)) for s in block_param_shapes(obj).values())
    params = getattr(obj, "params", obj)
    return sum(int(np.asarray(v).size) for v in params.values())
