"""Minimal reverse-mode automatic differentiation over numpy arrays.

Gradients *accumulate*: ``backward`` adds into ``.grad`` of every tracked
leaf, so call ``zero_grad`` (or ``ParamStore.zero_grad``) between steps.
Only leaves keep a ``.grad``; intermediate gradients live for the duration of
one ``backward`` call.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            data = np.asarray(data, dtype=DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.grad = np.zeros_like(self.data) if requires_grad and _backward is None else None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operators
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return slice_(self, idx)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents, backward_fn) -> Tensor:
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    # subgradient 0 at 0
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh approximation."""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * (v * v * v)))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw)


def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` as in ``np.pad``."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if all(w == (0, 0) for w in widths):
        return x
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[idx],))


def roll(x, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),))


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along ``axis`` (no affine part; compose with mul/add for that)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw)


# ---------------------------------------------------------------- backward and checking


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg


def grad_check(
    f: Callable[..., Tensor],
    point,
    step: float = 1e-5,
    floor: float = 1e-6,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst element-wise relative error between backprop and central differences.

    ``point`` is one array or a sequence of arrays; ``f`` receives one Tensor per
    array. Relative error is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_per_input`` only that many randomly chosen entries per input are
    perturbed. The default floor sits above the round-off of a central
    difference with ``step=1e-5`` on an order-one function (about 1e-11), so
    gradients that are exactly zero do not register as failures.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=DTYPE)] if single else [np.array(p, dtype=DTYPE) for p in point]

    tracked = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(*tracked)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: function value is not finite")
    out.backward()
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = tracked[k].grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"grad_check: non-finite analytic gradient for input {k}")
        flat_idx = np.arange(arr.size)
        if max_per_input is not None and arr.size > max_per_input:
            flat_idx = rng.choice(arr.size, max_per_input, replace=False)
        for i in flat_idx:
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[k].flat[i] += sign * step
                vals.append(f(*[Tensor(p) for p in probe]).item())
            if not np.all(np.isfinite(vals)):
                raise NumericError(f"grad_check: non-finite value perturbing input {k} entry {i}")
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = analytic.flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- parameters

GROUPS = ("encoder", "processor", "decoder")


@dataclass(eq=False)
class Param:
    tensor: Tensor
    group: str
    frozen: bool = False
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.tensor.data)
        if self.v is None:
            self.v = np.zeros_like(self.tensor.data)


@dataclass(eq=False)
class ParamStore:
    """Named parameters, each in one group, with a frozen flag and Adam moments."""

    params: "OrderedDict[str, Param]" = field(default_factory=OrderedDict)

    def add(self, name: str, value: np.ndarray, group: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        self.params[name] = Param(t, group)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, p in self.params.items() if group is None or p.group == group]

    def n_values(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for p in self.params.values():
            p.frozen = p.group not in groups
            p.tensor.requires_grad = not p.frozen
            if p.tensor.requires_grad and p.tensor.grad is None:
                p.tensor.grad = np.zeros_like(p.tensor.data)

    def group_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name in self.names(group):
            h.update(name.encode())
            h.update(self.params[name].tensor.data.tobytes())
        return h.hexdigest()

    def hashes(self) -> dict[str, str]:
        return {g: self.group_hash(g) for g in GROUPS}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            p.tensor.data[...] = values[n]


# ---------------------------------------------------------------- archive

ARCHIVE_MAGIC = b"OCPARAM"
ARCHIVE_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ArchiveError(DataError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _array_block(a: np.ndarray, code: int) -> bytes:
    return a.astype(_DTYPES[code]).tobytes()


def dump_params(store: ParamStore, meta: bytes = b"", dtype: str = "float64") -> bytes:
    """Serialize parameters, groups, frozen flags and Adam moments.

    Layout: magic, version byte, u32 meta length + meta, u32 count, then per
    tensor: name, group, frozen u8, dtype u8, ndim u8, u32 dims, step u64,
    values, m, v. A trailing SHA-256 covers everything before it.
    """
    code = {"float32": 0, "float64": 1}[dtype]
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<B", ARCHIVE_VERSION))
    buf.write(struct.pack("<I", len(meta)) + meta)
    buf.write(struct.pack("<I", len(store)))
    for name, p in store.items():
        buf.write(_pack_str(name))
        buf.write(_pack_str(p.group))
        shape = p.tensor.shape
        buf.write(struct.pack("<BBB", int(p.frozen), code, len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(struct.pack("<Q", p.step))
        for arr in (p.tensor.data, p.m, p.v):
            buf.write(_array_block(arr, code))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def load_params(blob: bytes) -> tuple[ParamStore, bytes]:
    if len(blob) < len(ARCHIVE_MAGIC) + 1 + 32 or not blob.startswith(ARCHIVE_MAGIC):
        raise ArchiveError("not a parameter archive (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    version = body[len(ARCHIVE_MAGIC)]
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"archive version {version} unsupported (expected {ARCHIVE_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise ArchiveError("archive integrity check failed (hash mismatch)")
    r = io.BytesIO(body)
    r.seek(len(ARCHIVE_MAGIC) + 1)

    def read(fmt):
        s = struct.Struct(fmt)
        return s.unpack(r.read(s.size))

    def read_str():
        (n,) = read("<H")
        return r.read(n).decode("utf-8")

    (mlen,) = read("<I")
    meta = r.read(mlen)
    (count,) = read("<I")
    store = ParamStore()
    for _ in range(count):
        name, group = read_str(), read_str()
        frozen, code, ndim = read("<BBB")
        shape = read(f"<{ndim}I")
        (step,) = read("<Q")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        arrs = [np.frombuffer(r.read(n * dt.itemsize), dt).reshape(shape).astype(DTYPE) for _ in range(3)]
        store.add(name, arrs[0], group)
        p = store.params[name]
        p.frozen, p.m, p.v, p.step = bool(frozen), arrs[1], arrs[2], step
        p.tensor.requires_grad = not p.frozen
    return store, meta
