"""Dataset ingestion (8-bit binary PGM), resizing, splitting and synthetic data.

On-disk layout::

    <dir>/images/<id>.pgm
    <dir>/masks/<id>_mask.pgm
    <dir>/split.json          optional {"train": [...], "val": [...], "test": [...], "seed": s}

A flat directory holding ``<id>.pgm`` next to ``<id>_mask.pgm`` is accepted too.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorcore import DTYPE

MASK_SUFFIX = "_mask"
MASK_LEVEL = 127


class DataError(ValueError):
    pass


@dataclass
class SampleSet:
    images: list[np.ndarray]
    masks: list[np.ndarray]
    ids: list[str]
    # per-sample ellipse parameters when synthetic: (cy, cx, ry, rx, theta)
    ellipses: dict[str, list[tuple[float, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.images) == len(self.masks) == len(self.ids):
            raise DataError("images, masks and ids must have equal length")
        for i, (im, m) in enumerate(zip(self.images, self.masks)):
            if im.shape != m.shape:
                raise DataError(f"sample {self.ids[i]}: image {im.shape} vs mask {m.shape}")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> "SampleSet":
        index = {k: i for i, k in enumerate(self.ids)}
        try:
            pos = [index[k] for k in ids]
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]!r}") from None
        return SampleSet(
            [self.images[i] for i in pos], [self.masks[i] for i in pos], list(ids),
            {k: self.ellipses[k] for k in ids if k in self.ellipses},
        )

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self.images, axis=0), np.concatenate(self.masks, axis=0)


# PGM


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise DataError("PGM header ends early")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM as a (h, w) uint8 array."""
    data = Path(path).read_bytes()
    try:
        tokens, start = _pgm_tokens(data, 4)
        if tokens[0] != b"P5":
            raise DataError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raster = data[start:start + width * height]
    if len(raster) != width * height:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {width * height} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def _as_tensor(img: np.ndarray) -> np.ndarray:
    return img.astype(DTYPE).reshape(1, 1, *img.shape)


def load_dataset(directory) -> SampleSet:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    if (directory / "images").is_dir():
        img_dir, mask_dir = directory / "images", directory / "masks"
    else:
        img_dir = mask_dir = directory
    image_ids = sorted(p.stem for p in img_dir.glob("*.pgm") if not p.stem.endswith(MASK_SUFFIX))
    mask_ids = sorted(p.stem[: -len(MASK_SUFFIX)] for p in mask_dir.glob(f"*{MASK_SUFFIX}.pgm")) if mask_dir.is_dir() else []
    for i in image_ids:
        if i not in mask_ids:
            raise DataError(f"orphan image {i!r}: no {i}{MASK_SUFFIX}.pgm")
    for i in mask_ids:
        if i not in image_ids:
            raise DataError(f"orphan mask {i!r}: no {i}.pgm")
    if not image_ids:
        raise DataError(f"{directory}: no samples found")
    images, masks = [], []
    for i in image_ids:
        im = read_pgm(img_dir / f"{i}.pgm")
        m = read_pgm(mask_dir / f"{i}{MASK_SUFFIX}.pgm")
        if im.shape != m.shape:
            raise DataError(f"sample {i!r}: image {im.shape} and mask {m.shape} differ in size")
        images.append(_as_tensor(im) / 255.0)
        masks.append(_as_tensor(m > MASK_LEVEL))
    return SampleSet(images, masks, image_ids)


def save_dataset(ds: SampleSet, directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for i, im, m in zip(ds.ids, ds.images, ds.masks):
        write_pgm(directory / "images" / f"{i}.pgm", to_uint8(im[0, 0]))
        write_pgm(directory / "masks" / f"{i}{MASK_SUFFIX}.pgm", (m[0, 0] > 0.5).astype(np.uint8) * 255)


# resizing


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(x: np.ndarray, out_h: int, out_w: int, kind: str = "bilinear") -> np.ndarray:
    """Resize the two trailing axes of an (n, c, h, w) tensor."""
    x = np.asarray(x, dtype=DTYPE)
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = x.shape[-2:]
    if kind == "nearest":
        rows = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
        cols = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
        return x[..., rows[:, None], cols[None, :]]
    if kind != "bilinear":
        raise ValueError(f"unknown resize kind {kind!r}")
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    top = x[..., r0, :] * (1 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def resize_set(ds: SampleSet, size: int) -> SampleSet:
    """Images bilinear, masks nearest (stay binary)."""
    return SampleSet(
        [resize(im, size, size, "bilinear") for im in ds.images],
        [resize(m, size, size, "nearest") for m in ds.masks],
        list(ds.ids),
    )


# splitting


@dataclass
class SplitIndices:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitIndices":
        d = json.loads(text)
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d.get("seed", 0)))


def split(ids, fractions: Sequence[float] = (0.64, 0.16, 0.20), seed: int = 0) -> SplitIndices:
    """Seeded shuffle, then contiguous train/val/test cut.

    Test and validation sizes are rounded from their fractions; training takes
    the remainder.
    """
    if isinstance(ids, SampleSet):
        ids = ids.ids
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty set")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_test = int(round(n * fractions[2]))
    n_val = min(int(round(n * fractions[1])), n - n_test)
    n_train = n - n_test - n_val
    return SplitIndices(
        shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:], seed,
    )


def load_split(directory) -> SplitIndices | None:
    p = Path(directory) / "split.json"
    if not p.exists():
        return None
    return SplitIndices.from_json(p.read_text())


# synthetic lesions


def ellipse_value(yy, xx, ellipse) -> np.ndarray:
    """Implicit ellipse function; <= 1 inside."""
    cy, cx, ry, rx, theta = ellipse
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2


def synth_generate(n: int, size: int, seed: int = 0, noise: float = 0.05) -> SampleSet:
    """Dark noisy background with 1-3 bright ellipses; mask is the ellipse union."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(DTYPE) + 0.5
    images, masks, ids, ellipses = [], [], [], {}
    for k in range(n):
        sid = f"s{k:04d}"
        img = np.full((size, size), rng.uniform(0.05, 0.2), dtype=DTYPE)
        mask = np.zeros((size, size), dtype=bool)
        shapes = []
        for _ in range(int(rng.integers(1, 4))):
            ry, rx = rng.uniform(0.08, 0.25, size=2) * size
            cy, cx = rng.uniform(0.2, 0.8, size=2) * size
            theta = rng.uniform(0, math.pi)
            e = (float(cy), float(cx), float(ry), float(rx), float(theta))
            inside = ellipse_value(yy, xx, e) <= 1.0
            img[inside] = rng.uniform(0.6, 0.9)
            mask |= inside
            shapes.append(e)
        img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
        images.append(_as_tensor(img))
        masks.append(_as_tensor(mask))
        ids.append(sid)
        ellipses[sid] = shapes
    return SampleSet(images, masks, ids, ellipses)
