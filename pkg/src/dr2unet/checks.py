"""Canonical desk-shape gradient checks for every differentiable piece."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import models, nnops, r2blocks
from .tensorcore import GradReport, grad_check, mul, sum_all

# name -> builder(seed) -> (forward_fn, params)
CASES: dict[str, Callable] = {}


def _case(name):
    def deco(fn):
        CASES[name] = fn
        return fn
    return deco


def _projected(out, probe):
    # a random projection gives every output entry a distinct, O(1) weight
    return sum_all(mul(out, probe))


@_case("conv")
def conv_case(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": rng.uniform(-1, 1, (2, 3, 5, 5)),
        "w": rng.uniform(-1, 1, (4, 3, 3, 3)),
        "b": rng.uniform(-1, 1, 4),
    }
    probe = rng.uniform(-1, 1, (2, 4, 5, 5))
    return lambda p: _projected(nnops.conv2d(p["x"], p["w"], p["b"]), probe), params


@_case("convt")
def conv_transpose_case(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": rng.uniform(-1, 1, (1, 3, 4, 4)),
        "w": rng.uniform(-1, 1, (3, 2, 3, 3)),
        "b": rng.uniform(-1, 1, 2),
    }
    probe = rng.uniform(-1, 1, (1, 2, 8, 8))
    return lambda p: _projected(nnops.conv_transpose2d(p["x"], p["w"], p["b"]), probe), params


@_case("maxpool")
def maxpool_case(seed):
    rng = np.random.default_rng(seed)
    params = {"x": rng.uniform(-1, 1, (1, 2, 8, 8))}
    probe = rng.uniform(-1, 1, (1, 2, 4, 4))
    return lambda p: _projected(nnops.maxpool2d(p["x"])[0], probe), params


@_case("bce")
def sigmoid_bce_case(seed):
    rng = np.random.default_rng(seed)
    params = {"z": rng.uniform(-3, 3, (1, 1, 4, 4))}
    target = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    probe = rng.uniform(-1, 1, (1, 1, 4, 4))

    def fn(p):
        return nnops.add(nnops.bce_loss(p["z"], target), _projected(nnops.sigmoid(p["z"]), probe))

    return fn, params


def _generic_point(params, rng):
    # zero biases can park pre-activations exactly on the ReLU kink
    return {k: rng.uniform(-0.1, 0.1, v.shape) if v.ndim == 1 else v for k, v in params.items()}


def _block_case(spec: r2blocks.BlockSpec, seed, shape=(1, 2, 8, 8)):
    rng = np.random.default_rng(seed)
    params = _generic_point(r2blocks.init_block(spec, rng), rng)
    params["x"] = rng.uniform(-1, 1, shape)
    probe = rng.uniform(-1, 1, (shape[0], spec.c_out, *shape[2:]))
    return lambda p: _projected(r2blocks.block_forward(p["x"], spec, p), probe), params


@_case("rcl")
def rcl_case(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": rng.uniform(-1, 1, (1, 2, 8, 8)),
        "w_f": rng.normal(0, 0.3, (3, 2, 3, 3)),
        "w_r": rng.normal(0, 0.3, (3, 3, 3, 3)),
        "b": rng.uniform(-0.5, 0.5, 3),
    }
    probe = rng.uniform(-1, 1, (1, 3, 8, 8))

    def fn(p):
        return _projected(r2blocks.rcl_forward(p["x"], r2blocks.RCLParams(p["w_f"], p["b"], p["w_r"], 2)), probe)

    return fn, params


@_case("residual")
def residual_case(seed):
    return _block_case(r2blocks.BlockSpec("residual", 2, 3, t=0), seed)


@_case("r2")
def r2_case(seed):
    return _block_case(r2blocks.BlockSpec("residual", 2, 3, t=2), seed)


@_case("dense-r2")
def dense_r2_case(seed):
    return _block_case(r2blocks.BlockSpec("dense_r2", 2, 2, t=2), seed)


def _model_case(variant, seed):
    cfg = models.ModelConfig(variant=variant, depth=2, base_width=2, t=2, dropout_rate=0.0,
                             input_size=(8, 8), seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((1, 1, 8, 8))
    y = (rng.random((1, 1, 8, 8)) > 0.5).astype(float)
    params = _generic_point(models.build(cfg).params, rng)
    return lambda p: nnops.bce_loss(models.forward(cfg, p, x), y), params


@_case("model")
def model_case(seed):
    return _model_case("dense_r2unet", seed)


@_case("model-unet")
def unet_case(seed):
    return _model_case("unet", seed)


@_case("model-resunet")
def resunet_case(seed):
    return _model_case("resunet", seed)


def run(name: str, seed: int = 0, step: float = 1e-5, threshold: float = 1e-4) -> GradReport:
    fn, params = CASES[name](seed)
    return grad_check(fn, params, step, threshold)
