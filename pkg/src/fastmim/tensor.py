"""Dense float tensors with reverse-mode automatic differentiation.

numpy arrays hold the data; every differentiable operation appends a node
to a per-thread tape.  ``backward`` replays the tape once in reverse
(execution order is a topological order by construction), so graphs can be
arbitrarily deep without recursion.  float32 is the working precision;
gradient checks switch to float64 via the ``default_dtype`` context.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Gradient-tape contract violation (non-scalar loss, spent tape, ...)."""


_state = threading.local()


def current_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the working float type (float64 for grad checks)."""
    old = current_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class Tape:
    """Execution-ordered record of differentiable ops for one thread."""

    def __init__(self):
        self.nodes: list = []
        self.spent = False

    def record(self, out, parents, backward):
        if self.spent:
            # first op of a fresh forward pass after backward() resets the tape
            self.nodes = []
            self.spent = False
        self.nodes.append((out, parents, backward))


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


class Tensor:
    """Dense float array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_track")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(current_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._track = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; full definitions live at module level
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _stats(arr: np.ndarray) -> str:
    if arr.size == 0:
        return f"shape={arr.shape} empty"
    return (f"shape={arr.shape} min={np.nanmin(arr):.4g} "
            f"max={np.nanmax(arr):.4g} mean={np.nanmean(arr):.4g}")


def _apply(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        detail = "; ".join(f"input{i} {_stats(p.data)}" for i, p in enumerate(parents))
        raise NumericError(f"{op}: non-finite output ({detail})")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._track = any(p._track for p in parents)
    if out._track:
        active_tape().record(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tracked leaf reachable from the scalar loss.

    Consumes the tape: a second call without a new forward pass raises.
    """
    tape = active_tape()
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.spent:
        raise TapeError("tape already consumed; run a new forward pass first")
    if not tape.nodes:
        raise TapeError("tape is empty; no tracked operations were recorded")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for out, parents, bwd in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        needs = tuple(p._track for p in parents)
        pgrads = bwd(g, needs)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p._track:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if p.requires_grad and key not in produced:
                leaves[key] = p

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    tape.nodes = []
    tape.spent = True


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# binary / elementwise ops

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bwd(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _apply("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bwd(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return _apply("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        return (_unbroadcast(g * bd, a.shape) if needs[0] else None,
                _unbroadcast(g * ad, b.shape) if needs[1] else None)

    return _apply("mul", ad * bd, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g, needs):
        return (g * s,)

    return _apply("scale", a.data * s, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    e = _erf(x * _INV_SQRT2)

    def bwd(g, needs):
        d = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * d,)

    return _apply("gelu", 0.5 * x * (1.0 + e), (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", y, (a,), bwd)


def layernorm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (pre-affine)."""
    if eps <= 0:
        raise ShapeError(f"layernorm: eps must be > 0, got {eps}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _apply("layernorm", y, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g, needs):
        return (np.full_like(a.data, float(g) / n),)

    return _apply("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g, needs):
        return (np.full_like(a.data, float(g)),)

    return _apply("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    k = 2.0 / d.size

    def bwd(g, needs):
        gd = float(g) * k * d
        return (gd if needs[0] else None, -gd if needs[1] else None)

    return _apply("mse", np.asarray((d * d).mean(), dtype=d.dtype), (a, b), bwd)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Batched on equal leading dims, or 2-D rhs applied
    to every row of a stacked lhs."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g, needs):
        da = db = None
        if needs[0]:
            da = g @ np.swapaxes(bd, -1, -2)
        if needs[1]:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                db = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = np.swapaxes(ad, -1, -2) @ g
        return (da, db)

    return _apply("matmul", ad @ bd, (a, b), bwd)


# ---------------------------------------------------------------------------
# index remaps

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = 1
    neg = 0
    for s in shape:
        if s == -1:
            neg += 1
        else:
            known *= s
    if neg > 1 or (neg == 0 and known != a.size) or (neg == 1 and (known == 0 or a.size % known)):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g, needs):
        return (g.reshape(a.shape),)

    return _apply("reshape", a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"transpose: axes {axes} not a permutation of {a.ndim} dims")
        inv = tuple(np.argsort(axes))
    else:
        inv = None

    def bwd(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _apply("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def _check_key(shape: tuple, key) -> None:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise IndexError(f"slice: {len(key)} indices for {len(shape)}-d tensor")
    for k, n in zip(key, shape):
        if isinstance(k, int):
            if not -n <= k < n:
                raise IndexError(f"slice: index {k} out of range for extent {n}")
        elif isinstance(k, slice):
            for bound in (k.start, k.stop):
                if bound is not None and not -n <= bound <= n:
                    raise IndexError(f"slice: bound {bound} out of range for extent {n}")
            if k.step is not None and k.step <= 0:
                raise IndexError("slice: only positive steps supported")
        else:
            raise IndexError(f"slice: unsupported index {k!r}")


def slice_(a: Tensor, key) -> Tensor:
    _check_key(a.shape, key)

    def bwd(g, needs):
        gx = np.zeros_like(a.data)
        gx[key] += g
        return (gx,)

    return _apply("slice", np.ascontiguousarray(a.data[key]), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, needs):
        outs = []
        for i, t in enumerate(tensors):
            if not needs[i]:
                outs.append(None)
                continue
            sel = [slice(None)] * g.ndim
            sel[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(sel)]))
        return tuple(outs)

    return _apply("concat", np.concatenate([t.data for t in tensors], axis=axis),
                  tuple(tensors), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} does not broadcast to {shape}")

    def bwd(g, needs):
        return (_unbroadcast(g, a.shape),)

    return _apply("broadcast_to", np.ascontiguousarray(out), (a,), bwd)


def take_along(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a (B, N, D) tensor: out[b, i] = a[b, index[b, i]]."""
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"take_along: need (B,N,D) and (B,k), got {a.shape}, {index.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError("take_along: index out of range")
    bidx = np.arange(a.shape[0])[:, None]

    def bwd(g, needs):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (bidx, index), g)
        return (gx,)

    return _apply("take_along", np.ascontiguousarray(a.data[bidx, index]), (a,), bwd)


def scatter_along(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Row scatter into a (B, N, D) tensor: out[b, index[b, i]] = values[b, i].

    Indices must be unique per row; untouched rows keep base's values.
    """
    if base.ndim != 3 or values.ndim != 3 or index.shape != values.shape[:2]:
        raise ShapeError(
            f"scatter_along: shapes {base.shape}, {index.shape}, {values.shape} inconsistent")
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= base.shape[1]):
        raise IndexError("scatter_along: index out of range")
    bidx = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[bidx, index] = values.data

    def bwd(g, needs):
        gb = gv = None
        if needs[0]:
            gb = g.copy()
            gb[bidx, index] = 0
        if needs[1]:
            gv = np.ascontiguousarray(g[bidx, index])
        return (gb, gv)

    return _apply("scatter_along", out, (base, values), bwd)


# ---------------------------------------------------------------------------
# raw tensor dump: rank and extents as little-endian u64, float32 LE payload

def dump_tensor(f, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    f.write(struct.pack("<Q", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f) -> np.ndarray:
    raw = f.read(8)
    if len(raw) != 8:
        raise IOError("tensor dump: truncated header")
    rank, = struct.unpack("<Q", raw)
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise IOError("tensor dump: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        dump_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
