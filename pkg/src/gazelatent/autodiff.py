"""Reverse-mode differentiation over dense float64 arrays.

A small define-by-run engine: primitive ops compute forward values with
numpy and append one record each to the active :class:`Tape`. A backward
sweep over the records in reverse yields gradients for every watched
parameter. Tapes are rebuilt on every forward pass; there is no graph
caching and no view/stride machinery beyond explicit broadcast/reshape.

Everything is float64. Storage is dense row-major.
"""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when primitive inputs do not conform to its signature."""


class DomainError(ValueError):
    """Raised when an input lies outside a primitive's documented domain."""


class TapeUsageError(RuntimeError):
    """Raised on misuse of the tape API (non-scalar backward, double watch...)."""


class EvaluationError(RuntimeError):
    """Raised when a checked function evaluates to a non-finite value."""


_state = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Dense float64 array plus an optional handle into the active tape.

    Constants (inputs, labels, one-hot indicators) have ``node is None`` and
    never receive gradients.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    """One primitive application: op kind, input/output node ids and the
    closure that maps the output adjoint to per-input adjoints."""

    op: str
    inputs: tuple[int | None, ...]
    out: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Used as a context manager; while active, every primitive op appends a
    record. Records are topologically ordered by construction and the
    backward sweep visits each exactly once, in reverse.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.shapes: dict[int, tuple[int, ...]] = {}
        self.watched: dict[str, int] = {}
        self._next = 0

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise TapeUsageError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def new_node(self, shape: tuple[int, ...]) -> int:
        node = self._next
        self._next += 1
        self.shapes[node] = shape
        return node

    def watch(self, params: "ParamSet", group: str | None = None) -> dict[str, Tensor]:
        """Register parameters as differentiable leaves, returning live Tensors.

        ``group`` restricts watching to one parameter group; other params can
        still be used as constants by the caller.
        """
        out: dict[str, Tensor] = {}
        for name, arr in params.items(group):
            if name in self.watched:
                raise TapeUsageError(f"parameter {name!r} watched twice")
            node = self.new_node(arr.shape)
            self.watched[name] = node
            out[name] = Tensor(arr, node)
        return out


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a recorded scalar w.r.t. every watched parameter.

    Parameters not on any path to ``output`` get a zero gradient of matching
    shape. Deterministic: the reverse sweep is a fixed-order fold, so equal
    tapes give bit-identical gradients.
    """
    if output.data.shape != ():
        raise TapeUsageError(
            f"backward needs a scalar output, got shape {output.data.shape}"
        )
    adjoints: dict[int, np.ndarray] = {}
    if output.node is not None:
        adjoints[output.node] = np.ones(())
    for rec in reversed(tape.records):
        g = adjoints.pop(rec.out, None)
        if g is None:
            continue
        for node, contrib in zip(rec.inputs, rec.backward(g)):
            if node is None or contrib is None:
                continue
            acc = adjoints.get(node)
            adjoints[node] = contrib if acc is None else acc + contrib
    return {
        name: adjoints.get(node, np.zeros(tape.shapes[node]))
        for name, node in tape.watched.items()
    }


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
          bwd: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(out_data)
    node = tape.new_node(out_data.shape)
    tape.records.append(Record(op, tuple(t.node for t in inputs), node, bwd))
    return Tensor(out_data, node)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", out, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"bias-add: {x.shape} + {b.shape}")
    width = b.shape[0]
    out = x.data + b.data

    def bwd(g):
        return g, g.reshape(-1, width).sum(axis=0)

    return _emit("bias-add", out, (x, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"elementwise-mul: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _emit("elementwise-mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit("scalar-mul", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # numerically stable split over sign
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _emit("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = xd.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)

    return _emit("reduce-sum", out, (x,), bwd)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    out = xd.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, xd.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, xd.shape).copy(),)

    return _emit("reduce-mean", out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log-softmax normalized over one grouping axis; other axes are groups."""
    x = as_tensor(x)
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log-softmax-grouped", out, (x,), bwd)


def gather_onehot(x: Tensor, onehot: np.ndarray) -> Tensor:
    """Sum of ``x * onehot`` over the trailing axis.

    The indicator is plain data: gradients flow to ``x`` only.
    """
    x = as_tensor(x)
    oh = np.asarray(onehot, dtype=np.float64)
    if oh.shape != x.shape:
        raise ShapeMismatchError(f"gather-by-onehot: {x.shape} vs {oh.shape}")
    out = (x.data * oh).sum(axis=-1)
    return _emit("gather-by-onehot", out, (x,), lambda g: (g[..., None] * oh,))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    try:
        out = np.broadcast_to(xd, shape)
    except ValueError as e:
        raise ShapeMismatchError(f"broadcast: {x.shape} -> {shape}") from e

    def bwd(g):
        extra = g.ndim - xd.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        expanded = tuple(i for i, n in enumerate(xd.shape) if n == 1 and g.shape[i] != 1)
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return _emit("broadcast", out.copy(), (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    try:
        out = xd.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: {x.shape} -> {shape}") from e
    return _emit("reshape", out, (x,), lambda g: (g.reshape(xd.shape),))


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "bias-add": bias_add,
    "add": add,
    "elementwise-mul": mul,
    "scalar-mul": scalar_mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "log-softmax-grouped": log_softmax,
    "gather-by-onehot": gather_onehot,
    "broadcast": broadcast_to,
    "reshape": reshape,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by kind name (used by the generic test sweeps)."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def primitive_kinds() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


# convenience composites (each still records its constituent primitives)


def neg(x: Tensor) -> Tensor:
    return scalar_mul(x, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return bias_add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# parameters

_GROUPS = ("recog", "gaze")


class ParamSet:
    """Named float64 parameter arrays, partitioned by name prefix.

    Names look like ``"recog/trunk_w"`` or ``"gaze/head_b"``; the prefix
    before the first ``/`` is the group ('recog' for the recognition network,
    'gaze' for the gaze network). Names are unique by dict construction.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            group = name.split("/", 1)[0]
            if group not in _GROUPS:
                raise ValueError(
                    f"parameter {name!r} must be prefixed with one of {_GROUPS}"
                )
            self._arrays[name] = np.asarray(arr, dtype=np.float64)

    def items(self, group: str | None = None) -> Iterable[tuple[str, np.ndarray]]:
        for name, arr in self._arrays.items():
            if group is None or name.startswith(group + "/"):
                yield name, arr

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, _ in self.items(group)]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self._arrays:
            raise KeyError(name)
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def copy(self) -> "ParamSet":
        return ParamSet({n: a.copy() for n, a in self._arrays.items()})

    def zeros_like(self, group: str | None = None) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(a) for n, a in self.items(group)}

    def flat(self, group: str | None = None) -> np.ndarray:
        parts = [a.ravel() for _, a in self.items(group)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def size(self, group: str | None = None) -> int:
        return sum(a.size for _, a in self.items(group))


def flatten_grads(grads: Mapping[str, np.ndarray], names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n]).ravel() for n in names]) if names else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoint round-trip

_DTYPE_TAG = "<f8"


def save_params(params: ParamSet, path) -> None:
    """Write a ParamSet as one JSON document, bit-exact on round-trip."""
    doc = {}
    for name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TAG)
        doc[name] = {
            "shape": list(arr.shape),
            "dtype": _DTYPE_TAG,
            "data": base64.b64encode(raw.tobytes()).decode("ascii"),
        }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_params(path) -> ParamSet:
    with open(path) as f:
        doc = json.load(f)
    arrays = {}
    for name, entry in doc.items():
        if entry.get("dtype") != _DTYPE_TAG:
            raise ValueError(f"checkpoint entry {name!r} has dtype {entry.get('dtype')!r}")
        raw = base64.b64decode(entry["data"])
        arrays[name] = np.frombuffer(raw, dtype=_DTYPE_TAG).reshape(entry["shape"]).copy()
    return ParamSet(arrays)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(fn: Callable[[dict[str, Tensor]], Tensor],
                            params: ParamSet, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps a name->Tensor dict to a scalar Tensor and must be
    deterministic given the parameter values. Returns the max over all
    parameter entries of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        out = fn(tape.watch(params))
    if not np.isfinite(out.data):
        raise EvaluationError("function is non-finite at the base point")
    grads = backward(tape, out)

    def value_at() -> float:
        v = fn({name: Tensor(arr) for name, arr in params.items()}).item()
        if not np.isfinite(v):
            raise EvaluationError("function is non-finite at a perturbed point")
        return v

    worst = 0.0
    for name, arr in params.items():
        flat = arr.ravel()
        gflat = grads[name].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = value_at()
            flat[i] = keep - step
            f_minus = value_at()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            if err > worst:
                worst = err
    return worst
