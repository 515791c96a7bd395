"""Dense float64 tensors with reverse-mode autodiff, Adam, and checkpoints.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  Broadcasting follows
numpy rules; gradients are summed back down to each parent's shape.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "log",
    "sigmoid",
    "log_sigmoid",
    "softmax",
    "tsum",
    "where",
    "masked",
    "dropout",
    "gather_rows",
    "take_along",
    "Adam",
    "dump_arrays",
    "parse_arrays",
    "save_arrays",
    "load_arrays",
    "numeric_grad",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Gradients accumulate, so callers zero leaf grads between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(data, parents: Sequence[Tensor], op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))

        out._backward = backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = _result(a.data / b.data, (a, b), "div")
    if out.requires_grad:

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        out._backward = backward
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, -g)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = _result(y, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * y)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)
    out = _result(y, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * y * (1.0 - y))
    return out


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` as ``-(max(-a, 0) + log1p(exp(-|a|)))``."""
    a = as_tensor(a)
    x = a.data
    y = -(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x))))
    out = _result(y, (a,), "log_sigmoid")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * _stable_sigmoid(-x))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (a,), "softmax")
    if out.requires_grad:

        def backward(g):
            _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        out._backward = backward
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape))

        out._backward = backward
    return out


def where(cond, a, fill) -> Tensor:
    """Select ``a`` where ``cond`` holds, else the constant ``fill``.

    No gradient reaches ``a`` at unselected entries, and values there never
    enter the output, so non-finite junk in ``a`` is harmless.
    """
    a = as_tensor(a)
    cond = np.asarray(cond, dtype=bool)
    out = _result(np.where(cond, a.data, fill), (a,), "where")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
    return out


def masked(a, mask) -> Tensor:
    """Elementwise multiply by a constant 0/1 mask."""
    return mul(a, Tensor(np.asarray(mask, dtype=np.float64)))


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# -- linear algebra and indexing --------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch shapes of {a.shape} and {b.shape} do not broadcast") from None
    out = _result(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        out._backward = backward
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, np.transpose(g, inverse))
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` with gradients scattered back by row."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
    out = _result(table.data[idx], (table,), "gather_rows")
    if out.requires_grad:

        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
            _accumulate(table, full)

        out._backward = backward
    return out


def take_along(a, idx, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = _result(np.take_along_axis(a.data, idx, axis=axis), (a,), "take_along")
    if out.requires_grad:

        def backward(g):
            full = np.zeros_like(a.data)
            # duplicate indices must accumulate, which put_along_axis would not do
            ax = axis % a.ndim
            grids = list(np.indices(idx.shape, sparse=True))
            grids[ax] = idx
            np.add.at(full, tuple(grids), g)
            _accumulate(a, full)

        out._backward = backward
    return out


# -- optimizer ----------------------------------------------------------------------


class Adam:
    """Adam with bias correction; defaults are the usual betas and eps."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 0.003,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([float(self.step_count)])
        return out


# -- checkpoint container -------------------------------------------------------------

_MAGIC = b"STANCKPT"
_VERSION = 1


def dump_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named float64 arrays; values little-endian and bit-exact."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def parse_arrays(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if buf[:8] != _MAGIC:
        raise ValueError(f"{source}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ValueError(f"{source}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{source}: trailing bytes after {count} arrays")
    return out


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_arrays(fh.read(), str(path))


# -- finite differences -----------------------------------------------------------------


def numeric_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = f()
            flat[i] = old - eps
            lo = f()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
