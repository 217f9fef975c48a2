"""Training loop, optimizers, dice tracking and learning-curve output."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import SampleSet
from .models import Model, predict
from .nnops import EVAL, TRAIN, bce_loss
from .tensorcore import Tape, backward, leaf_grads

log = logging.getLogger(__name__)

CURVE_HEADER = ("epoch", "train_loss", "train_dice", "val_dice", "seconds")
DICE_SMOOTH = 1.0


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 50
    seed: int = 0
    dice_threshold: float = 0.5
    augment_flips: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_dice: float
    val_dice: float
    seconds: float

    def replay_key(self) -> tuple:
        """Everything except wall time."""
        return (self.epoch, self.train_loss, self.train_dice, self.val_dice)


# optimizers


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``."""
    if state is None:
        state = AdamState({}, {})
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def sgd_momentum_step(params: dict, grads: dict, velocity: dict | None, lr: float, momentum: float = 0.9) -> dict:
    velocity = {} if velocity is None else velocity
    for k, p in params.items():
        vel = velocity.setdefault(k, np.zeros_like(p))
        vel *= momentum
        vel -= lr * grads[k]
        p += vel
    return velocity


# dice


def dice_of_batch(probs, targets, threshold: float = 0.5) -> float:
    """Smoothed dice over all pixels: (2TP + 1) / (2TP + FP + FN + 1)."""
    probs, targets = np.asarray(probs), np.asarray(targets)
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {targets.shape}")
    pred = probs >= threshold
    gt = targets > 0.5
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    return (2 * tp + DICE_SMOOTH) / (2 * tp + fp + fn + DICE_SMOOTH)


def evaluate_dice(model: Model, ds: SampleSet, threshold: float = 0.5, batch_size: int = 8) -> float:
    if len(ds) == 0:
        return float("nan")
    x, y = ds.stacked()
    probs = np.concatenate([predict(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    return dice_of_batch(probs, y, threshold)


def _check_finite(named: dict, what: str) -> None:
    for k, v in named.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite {what} in tensor {k!r}")


def _flip(x: np.ndarray, y: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    if rng.random() < 0.5:
        x, y = x[..., ::-1], y[..., ::-1]
    if rng.random() < 0.5:
        x, y = x[..., ::-1, :], y[..., ::-1, :]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def train(model: Model, train_set: SampleSet, val_set: SampleSet, tcfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], object] | None = None) -> tuple[Model, list[EpochRecord]]:
    """Minimise BCE on logits; records loss and dice once per epoch.

    Shuffling, dropout masks and augmentation all draw from a generator seeded
    by ``tcfg.seed``; the model's initial weights come from its own config seed.
    A truthy return from ``on_epoch`` stops training after that epoch.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    x_all, y_all = train_set.stacked()
    rng = np.random.default_rng(tcfg.seed)
    state = None
    records: list[EpochRecord] = []
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_all))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if tcfg.augment_flips:
                xb, yb = _flip(xb, yb, rng)
            tape = Tape()
            leaves = tape.leaves_from(model.params)
            logits = model.forward(xb, TRAIN, rng, params=leaves)
            loss = bce_loss(logits, yb)
            value = float(loss.value.item())
            if not np.isfinite(value):
                raise NumericError(f"loss became {value} at epoch {epoch}")
            grads = leaf_grads(tape, backward(tape, loss))
            _check_finite(grads, "gradient")
            if tcfg.optimizer == "adam":
                state = adam_step(model.params, grads, state, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            else:
                state = sgd_momentum_step(model.params, grads, state, tcfg.lr, tcfg.momentum)
            _check_finite(model.params, "parameter")
            losses.append(value)
        rec = EpochRecord(
            epoch,
            float(np.mean(losses)),
            evaluate_dice(model, train_set, tcfg.dice_threshold),
            evaluate_dice(model, val_set, tcfg.dice_threshold) if len(val_set) else float("nan"),
            time.perf_counter() - t0,
        )
        log.info("epoch %d loss %.4f train dice %.4f val dice %.4f", rec.epoch, rec.train_loss, rec.train_dice, rec.val_dice)
        records.append(rec)
        if on_epoch is not None and on_epoch(rec):
            break
    return model, records


# curves


def write_curves_csv(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_dice), repr(r.val_dice), f"{r.seconds:.3f}"])


def read_curves_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_dice"]),
                        float(r["val_dice"]), float(r["seconds"])) for r in rows]


def curves_svg(series: dict[str, Sequence[float]], title: str = "dice", width: int = 480, height: int = 240) -> str:
    """Minimal line chart, y fixed to [0, 1]."""
    pad = 30
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"]
    n = max((len(v) for v in series.values()), default=0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>',
        f'<text x="{width // 2}" y="18" text-anchor="middle" font-size="12">{title}</text>',
    ]
    for i, (label, ys) in enumerate(series.items()):
        pts = []
        for k, y in enumerate(ys):
            if not np.isfinite(y):
                continue
            px = pad + (width - 2 * pad) * (k / max(n - 1, 1))
            py = height - pad - (height - 2 * pad) * min(max(y, 0.0), 1.0)
            pts.append(f"{px:.1f},{py:.1f}")
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(pts)}"/>')
        parts.append(f'<text x="{pad + 4}" y="{pad + 14 * (i + 1)}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_curves_svg(records: Sequence[EpochRecord], path) -> None:
    Path(path).write_text(curves_svg({
        "train dice": [r.train_dice for r in records],
        "val dice": [r.val_dice for r in records],
    }))


def as_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
