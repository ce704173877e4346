"""Minimal reverse-mode differentiable arrays on top of numpy.

Every quantity in the model is a :class:`Tensor`.  When a :class:`Tape` is
active, each primitive application whose inputs require gradients is appended
to the tape in execution order; :meth:`Tape.backward` then walks the records
in reverse and accumulates vector-Jacobian products into the leaves.

The primitive set is closed:

    add, sub, neg, mul, div, matmul, exp, log, sin, sinc, rsqrt, gelu (tanh form),
    softmax, sum, mean, gather, scatter_add, local_map

plus the structural primitives reshape, transpose, concat, broadcast_to and
basic slicing.  Everything else (sigmoid, sqrt, cos, abs, linear layers) is a
composition of these.
"""

from __future__ import annotations

import contextvars
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

DEFAULT_DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, primitive: str, shapes: Iterable[tuple[int, ...]], detail: str = ""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{primitive}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


_tape_var: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("attnpot_tape", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if type(data) is not np.ndarray:
            data = np.asarray(data.data if isinstance(data, Tensor) else data)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


@dataclass
class Record:
    primitive: str
    out: Tensor
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of primitive applications (a computation record).

    Use as a context manager; leaves are marked with :meth:`watch`.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, *exc):
        _tape_var.reset(self._token)
        self._token = None
        return False

    def watch(self, x, name: str | None = None) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        t.requires_grad = True
        t.grad = None
        if name is not None:
            t.name = name
        return t

    def backward(self, output: Tensor, seed=None) -> None:
        if not isinstance(output, Tensor):
            raise GradientError("backward needs a Tensor output")
        if seed is None:
            if output.data.size != 1:
                raise GradientError(f"output must be scalar, got shape {output.shape}")
            seed = np.ones_like(output.data)
        output.grad = np.asarray(seed, dtype=output.data.dtype)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            rec.out.grad = None
            pgrads = rec.backward(g)
            for p, pg in zip(rec.parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg
        self.records.clear()


def current_tape() -> Tape | None:
    return _tape_var.get()


class no_grad:
    """Suspend recording inside the block."""

    def __enter__(self):
        self._token = _tape_var.set(None)

    def __exit__(self, *exc):
        _tape_var.reset(self._token)
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _tracked(*xs) -> bool:
    for x in xs:
        if isinstance(x, Tensor) and x.requires_grad:
            return True
    return False


def _emit(primitive: str, out_data, parents: tuple, backward: Callable) -> Tensor:
    tape = _tape_var.get()
    if tape is None:
        return Tensor(out_data)
    for x in parents:
        if isinstance(x, Tensor) and x.requires_grad:
            out = Tensor(out_data, requires_grad=True)
            tape.records.append(Record(primitive, out, parents, backward))
            return out
    return Tensor(out_data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(primitive, a, b, fn):
    ad, bd = _data(a), _data(b)
    try:
        return fn(ad, bd), ad, bd
    except ValueError as exc:
        raise ShapeError(primitive, (np.shape(ad), np.shape(bd)), str(exc)) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    out, ad, bd = _binary("add", a, b, np.add)
    sa, sb = np.shape(ad), np.shape(bd)
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    out, ad, bd = _binary("sub", a, b, np.subtract)
    sa, sb = np.shape(ad), np.shape(bd)
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a) -> Tensor:
    return _emit("neg", -_data(a), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    out, ad, bd = _binary("mul", a, b, np.multiply)

    def back(g):
        ga = _unbroadcast(g * bd, np.shape(ad)) if _tracked(a) else None
        gb = _unbroadcast(g * ad, np.shape(bd)) if _tracked(b) else None
        return ga, gb

    return _emit("mul", out, (a, b), back)


def div(a, b) -> Tensor:
    out, ad, bd = _binary("div", a, b, np.divide)

    def back(g):
        ga = _unbroadcast(g / bd, np.shape(ad)) if _tracked(a) else None
        gb = _unbroadcast(-g * out / bd, np.shape(bd)) if _tracked(b) else None
        return ga, gb

    return _emit("div", out, (a, b), back)


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _data(a)
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sin(a) -> Tensor:
    ad = _data(a)
    return _emit("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def sinc(a) -> Tensor:
    """sin(x)/x with value 1 (and slope 0) at x = 0."""
    x = _data(a)
    zero = x == 0
    safe = np.where(zero, 1.0, x).astype(x.dtype, copy=False)
    out = np.sin(safe)
    out /= safe
    out[zero] = 1.0

    def back(g):
        d = (np.cos(safe) - out) / safe
        d[zero] = 0.0
        return (g * d,)

    return _emit("sinc", out, (a,), back)


def local_map(a, value: np.ndarray, jacobian: np.ndarray) -> Tensor:
    """A map acting on the trailing axis of ``a`` alone, given its value and Jacobian.

    ``a`` is (..., n), ``value`` (..., m) and ``jacobian`` (..., m, n) with
    jacobian[..., i, j] = d value_i / d a_j.  The caller is responsible for
    the Jacobian being exact.
    """
    ad = _data(a)
    if value.shape[:-1] != ad.shape[:-1] or jacobian.shape != value.shape + ad.shape[-1:]:
        raise ShapeError("local_map", (ad.shape, value.shape, jacobian.shape), "value/jacobian do not match input")
    return _emit("local_map", value, (a,), lambda g: (np.einsum("...i,...ij->...j", g, jacobian),))


def rsqrt(a) -> Tensor:
    ad = _data(a)
    out = 1.0 / np.sqrt(ad)
    return _emit("rsqrt", out, (a,), lambda g: (g * (-0.5) * out * out * out,))


def gelu(a) -> Tensor:
    """GELU with the tanh approximation (fixed constants)."""
    x = _data(a)
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), back)


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if np.ndim(ad) < 2 or np.ndim(bd) < 2:
        raise ShapeError("matmul", (np.shape(ad), np.shape(bd)), "operands must be at least 2-D")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError("matmul", (ad.shape, bd.shape), str(exc)) from None

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if _tracked(a) else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if _tracked(b) else None
        return ga, gb

    return _emit("matmul", out, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    x = _data(a)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), back)


# --------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _data(a)
    out = np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _data(a)
    n = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------- index primitives

def gather(a, index, axis: int = 0) -> Tensor:
    """``a`` indexed with an integer array along ``axis``."""
    x = _data(a)
    index = np.asarray(index)
    try:
        out = np.take(x, index, axis=axis)
    except IndexError as exc:
        raise ShapeError("gather", (x.shape, index.shape), str(exc)) from None

    def back(g):
        ax = axis % x.ndim
        gg = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        moved = _index_add(x.shape[ax], index, gg)
        return (np.moveaxis(moved, 0, ax),)

    return _emit("gather", out, (a,), back)


def _index_add(n: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """out[index[i]] += values[i] over the leading index dims (bincount is much faster than add.at)."""
    rest = values.shape[index.ndim:]
    width = int(np.prod(rest)) if rest else 1
    flat = (index.reshape(-1, 1) * width + np.arange(width)).ravel()
    out = np.bincount(flat, weights=values.reshape(-1).astype(np.float64, copy=False), minlength=n * width)
    return out.astype(values.dtype, copy=False).reshape((n,) + rest)


def scatter_add(a, index, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``index``."""
    x = _data(a)
    index = np.asarray(index)
    if x.shape[: index.ndim] != index.shape:
        raise ShapeError("scatter_add", (x.shape, index.shape), "index must match leading dims")
    out = _index_add(num_segments, index, x)
    return _emit("scatter_add", out, (a,), lambda g: (g[index],))


# --------------------------------------------------------------- structural

def reshape(a, shape) -> Tensor:
    x = _data(a)
    try:
        out = x.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", (x.shape, tuple(shape)), str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(x.shape),))


def transpose(a, axes=None) -> Tensor:
    x = _data(a)
    out = np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(np.ndim(_data(a))))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    x = _data(a)
    try:
        out = np.broadcast_to(x, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", (x.shape, tuple(shape)), str(exc)) from None
    return _emit("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, x.shape),))


def concat(items, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in items]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", [d.shape for d in datas], str(exc)) from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tuple(items), back)


def getitem(a, idx) -> Tensor:
    x = _data(a)
    out = x[idx]

    def back(g):
        gz = np.zeros(x.shape, dtype=g.dtype)
        gz[idx] = g
        return (gz,)

    return _emit("getitem", out, (a,), back)


# --------------------------------------------------------------- composites

def sqrt(a) -> Tensor:
    return mul(a, rsqrt(a))


def cos(a) -> Tensor:
    return sin(add(a, 0.5 * math.pi))


def square(a) -> Tensor:
    return mul(a, a)


def sigmoid(a) -> Tensor:
    """Logistic function via a two-way softmax (overflow free)."""
    a = as_tensor(a)
    x = reshape(a, a.shape + (1,))
    both = concat([x, mul(x, 0.0)], axis=-1)
    return reshape(getitem(softmax(both, axis=-1), (..., 0)), a.shape)


def abs_(a) -> Tensor:
    return mul(a, np.sign(_data(a)))


def stop_gradient(a) -> Tensor:
    return Tensor(_data(a))


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------- evaluation API

def evaluate_with_gradients(fn: Callable[[dict], Tensor], leaves: dict) -> tuple[float, dict]:
    """Run ``fn`` on tracked copies of ``leaves`` and return (value, gradients).

    ``fn`` receives a dict of :class:`Tensor` keyed like ``leaves`` and must
    return a scalar Tensor.  Leaves the output does not depend on get zeros.
    """
    with Tape() as tape:
        tracked = {k: tape.watch(Tensor(np.asarray(v)), name=k) for k, v in leaves.items()}
        out = fn(tracked)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise GradientError(f"program output must be a scalar, got {getattr(out, 'shape', type(out))}")
        tape.backward(out)
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tracked.items()
    }
    return float(out.data), grads


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, component by component."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at component {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ------------------------------------------------------------ parameter store

CHECKPOINT_MAGIC = b"ATPCKPT\0"
CHECKPOINT_VERSION = 1
_DTYPES = {"fp64": np.dtype("<f8"), "fp32": np.dtype("<f4")}


@dataclass
class ParameterStore:
    """Named learnable arrays with per-array gradient accumulators."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, copy=True)
        self.arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def num_values(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.grads.items()},
        )

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            {k: v.astype(dtype) for k, v in self.grads.items()},
        )

    def tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.watch(Tensor(v), name=k) for k, v in self.arrays.items()}

    def collect(self, tensors: dict[str, Tensor], scale: float = 1.0) -> None:
        """Accumulate gradients held by ``tensors`` into the store."""
        for k, t in tensors.items():
            if t.grad is not None:
                self.grads[k] += scale * t.grad

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return load_checkpoint(path)


def save_checkpoint(path, store: ParameterStore, extra: dict | None = None) -> None:
    """Write ``magic | version | manifest length | manifest json | raw arrays``."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in store.arrays.items():
        key = "fp32" if arr.dtype == np.float32 else "fp64"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"arrays": entries, "extra": extra or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def _read_header(raw: bytes, path) -> tuple[dict, int]:
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, mlen = struct.unpack("<IQ", raw[pos : pos + 12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    return json.loads(raw[pos : pos + mlen].decode("utf-8")), pos + mlen


def read_checkpoint_manifest(path) -> dict:
    return _read_header(Path(path).read_bytes(), path)[0]


def load_checkpoint(path) -> ParameterStore:
    raw = Path(path).read_bytes()
    manifest, header = _read_header(raw, path)
    store = ParameterStore()
    for e in manifest["arrays"]:
        start = header + e["offset"]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)), offset=start)
        store.add(e["name"], arr.reshape(e["shape"]).astype(_DTYPES[e["dtype"]].newbyteorder("=")))
    return store
