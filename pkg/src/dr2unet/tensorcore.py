"""Rank-4 tensors, a define-by-run reverse-mode tape, and finite-difference checks.

Activations are plain ``float64`` numpy arrays laid out ``(n, c, h, w)``.
A :class:`Var` wraps such an array and, when it belongs to a :class:`Tape`,
lets every op that consumes it record a gradient rule.  Vars without a tape
are constants: ops accept them (or bare arrays) and simply do not record.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
# refuse allocations beyond 2**34 elements (128 GiB of f64)
MAX_ELEMENTS = 1 << 34
REL_EPS = 1e-8
MIN_STEP, MAX_STEP = 1e-6, 1e-4


class ShapeError(ValueError):
    pass


class NonDeterministicError(RuntimeError):
    """Two evaluations of a forward function at identical inputs disagreed."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    total = 1
    for d in shape:
        total *= d
    if total > MAX_ELEMENTS:
        raise OverflowError(f"shape {shape} has {total} elements, limit is {MAX_ELEMENTS}")
    return shape


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def he_init(shape: Sequence[int], fan_in: int, seed) -> np.ndarray:
    """Normal(0, sqrt(2 / fan_in)) samples; ``seed`` may be an int or a Generator."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    shape = tuple(int(d) for d in shape)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)


def as_array(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=DTYPE)


class Var:
    """A value node.  ``tape`` is None for constants."""

    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, id: int = -1, name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or f"#{self.id}"
        return f"Var({label}, shape={self.value.shape}, taped={self.tape is not None})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.values: dict[int, np.ndarray] = {}
        self.leaves: dict[str, Var] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, value, name: str | None = None) -> Var:
        """Register a differentiable input (parameter or probe tensor)."""
        arr = np.array(value, dtype=DTYPE)
        v = Var(arr, self, self._new_id(), name)
        self.values[v.id] = arr
        if name is not None:
            if name in self.leaves:
                raise KeyError(f"duplicate leaf name {name!r}")
            self.leaves[name] = v
        return v

    def leaves_from(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, backward) -> Var:
        for v in inputs:
            if v.tape is not None and v.tape is not self:
                raise ValueError(f"{op}: inputs belong to different tapes")
        out = Var(value, self, self._new_id())
        self.values[out.id] = value
        self.nodes.append(Node(op, tuple(v.id for v in inputs), out.id, backward))
        return out


def apply(op: str, inputs: Sequence, value: np.ndarray, backward) -> Var:
    """Wrap ``value`` as the result of ``op``; record on the inputs' tape if any."""
    tape = None
    for x in inputs:
        if isinstance(x, Var) and x.tape is not None:
            tape = x.tape
            break
    if tape is None:
        return Var(value)
    vars_ = [x if isinstance(x, Var) else Var(as_array(x)) for x in inputs]
    return tape.record(op, vars_, value, backward)


def backward(tape: Tape, loss) -> dict[int, np.ndarray]:
    """Reverse sweep from a 1x1x1x1 loss; returns gradients keyed by value id."""
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    if loss_id not in tape.values:
        raise KeyError(f"unknown value id {loss_id}")
    lv = tape.values[loss_id]
    if lv.shape != (1, 1, 1, 1):
        raise ShapeError(f"loss must be a 1x1x1x1 scalar, got shape {lv.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(lv)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for in_id, gi in zip(node.inputs, node.backward(g)):
            if gi is None or in_id < 0:
                continue
            if in_id in grads:
                grads[in_id] = grads[in_id] + gi
            else:
                grads[in_id] = gi
    for vid, g in grads.items():
        if g.shape != tape.values[vid].shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {tape.values[vid].shape} for id {vid}")
    return grads


def leaf_grads(tape: Tape, grads: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients for every named leaf, zeros where the loss does not reach."""
    return {
        name: grads[v.id] if v.id in grads else np.zeros_like(v.value)
        for name, v in tape.leaves.items()
    }


# generic ops used by tests and the losses


def sum_all(x) -> Var:
    xv = as_array(x)
    out = np.array(xv.sum(), dtype=DTYPE).reshape(1, 1, 1, 1)
    shape = xv.shape
    return apply("sum_all", [x], out, lambda g: (np.full(shape, g.item(), dtype=DTYPE),))


def mul(x, y) -> Var:
    xv, yv = as_array(x), as_array(y)
    if xv.shape != yv.shape:
        raise ShapeError(f"mul: shape mismatch {xv.shape} vs {yv.shape}")
    return apply("mul", [x, y], xv * yv, lambda g: (g * yv, g * xv))


# finite-difference gradient check


@dataclass
class GradReport:
    errors: dict[str, float]
    threshold: float
    step: float = 1e-5
    worst_index: dict[str, tuple[int, ...]] = field(default_factory=dict)
    # entries re-probed at neighbouring step sizes after missing the threshold
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def lines(self) -> Iterable[str]:
        for name, err in self.errors.items():
            flag = "ok" if err < self.threshold else "FAIL"
            extra = f"  ({self.refined[name]} re-probed)" if self.refined.get(name) else ""
            yield f"{name:<28s} {err:.3e}  {flag}{extra}"


def relative_error(a: np.ndarray, f: np.ndarray, eps: float = REL_EPS) -> np.ndarray:
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), eps)


def grad_check(
    forward_fn: Callable[[dict], "Var | np.ndarray"],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    threshold: float = 1e-4,
) -> GradReport:
    """Compare tape gradients with central differences, per parameter tensor.

    ``forward_fn`` receives a dict name -> Var (taped) or name -> ndarray
    (finite-difference probes) and must return a 1x1x1x1 loss.

    Entries that miss ``threshold`` are probed again at the neighbouring
    decades ``step / 10`` and ``step * 10`` (within [1e-6, 1e-4]) and keep the
    smallest error.  A ReLU or max-pool kink within ``step`` of the point
    spoils the larger steps, round-off spoils the smaller ones on gradients
    near 1e-8, while a wrong gradient rule is off at every step.
    """
    if not MIN_STEP <= step <= MAX_STEP:
        raise ValueError(f"step must lie in [{MIN_STEP}, {MAX_STEP}]")
    params = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}

    def scalar(p) -> float:
        return float(as_array(forward_fn(p)).reshape(-1)[0])

    first, second = scalar(params), scalar(params)
    if first != second:
        raise NonDeterministicError(
            f"forward_fn returned {first!r} then {second!r} at identical inputs (dropout left on?)"
        )

    tape = Tape()
    leaves = tape.leaves_from(params)
    loss = forward_fn(leaves)
    if as_array(loss).reshape(-1)[0] != first:
        raise NonDeterministicError("taped and untaped evaluations differ")
    analytic = leaf_grads(tape, backward(tape, loss))
    retry = [h for h in (step / 10.0, step * 10.0) if MIN_STEP <= h <= MAX_STEP]

    report = GradReport({}, threshold, step)
    for name, value in params.items():
        probe = dict(params)
        work = value.copy()
        probe[name] = work

        def central(idx, h):
            orig = work[idx]
            work[idx] = orig + h
            up = scalar(probe)
            work[idx] = orig - h
            down = scalar(probe)
            work[idx] = orig
            return (up - down) / (2.0 * h)

        rel = np.zeros(value.shape)
        n_refined = 0
        for idx in np.ndindex(value.shape):
            a = analytic[name][idx]
            rel[idx] = relative_error(a, central(idx, step))
            if rel[idx] >= threshold and retry:
                n_refined += 1
                for h in retry:
                    rel[idx] = min(rel[idx], relative_error(a, central(idx, h)))
                    if rel[idx] < threshold:
                        break
        at = np.unravel_index(int(np.argmax(rel)), rel.shape)
        report.errors[name] = float(rel[at])
        report.worst_index[name] = tuple(int(i) for i in at)
        report.refined[name] = n_refined
    return report


# binary tensor serialization: 4 little-endian u64 dims, then f64 LE values

_DIMS = struct.Struct("<4Q")


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.ndim > 4:
        raise ShapeError(f"cannot serialize rank-{arr.ndim} array")
    dims = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    fh.write(_DIMS.pack(*dims))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_DIMS.size)
    if len(head) != _DIMS.size:
        raise EOFError("truncated tensor header")
    dims = _DIMS.unpack(head)
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise OverflowError(f"tensor dims {dims} exceed limit")
    body = fh.read(8 * count)
    if len(body) != 8 * count:
        raise EOFError(f"truncated tensor body: wanted {8 * count} bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(DTYPE).reshape(dims)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
