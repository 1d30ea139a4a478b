"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors are immutable, row-major, float32 by default (float64 is used by
the gradient-check suites, where finite differences need the headroom).
Operations executed inside a `with Tape() as tape:` block are recorded on
that tape; outside a tape they are plain numpy computations. A tape node
stores the operation name, parent node ids, the cached output, the
backward closure, and a forward closure so the whole tape can be replayed
bit-identically.

Broadcasting is deliberately narrow: binary ops accept equal shapes or a
right operand whose shape matches the trailing axes of the left (bias
vectors, positional tables). Nothing else is implied.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "Tape", "active_tape",
    "add", "sub", "mul", "scale", "matmul", "bmm", "transpose", "reshape",
    "concat", "slice_axis", "mean", "tensor_sum", "softmax", "layer_norm",
    "gelu", "l2_normalize", "mse", "exp", "log", "maximum", "relu",
]

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class Tensor:
    """Immutable n-dimensional array value."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path for freshly computed arrays: freeze in place.
        # ascontiguousarray would promote 0-d scalars to shape (1,), so
        # only call it when the layout actually needs fixing.
        t = object.__new__(cls)
        arr = np.asarray(arr)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def astype(self, dtype) -> "Tensor":
        return Tensor._wrap(self.data.astype(dtype))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar; all routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "parents", "output", "backward", "forward")

    def __init__(self, op, parents, output, backward, forward):
        self.op = op
        self.parents = parents
        self.output = output
        self.backward = backward
        self.forward = forward


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    """The innermost open tape, or None when recording is off."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of operations; insertion order is topological."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._by_tensor: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def node_id(self, t: Tensor) -> Optional[int]:
        return self._by_tensor.get(id(t))

    def watch(self, t: Tensor) -> int:
        """Register `t` as a leaf (no-op if it is already on the tape)."""
        idx = self._by_tensor.get(id(t))
        if idx is None:
            idx = self._append(_Node("leaf", (), t, None, None))
        return idx

    def _append(self, node: _Node) -> int:
        idx = len(self._nodes)
        self._nodes.append(node)
        self._by_tensor[id(node.output)] = idx
        return idx

    def record(self, op: str, parents: Sequence[Tensor], output: Tensor,
               backward: Callable, forward: Callable) -> int:
        pids = tuple(self.watch(p) for p in parents)
        return self._append(_Node(op, pids, output, backward, forward))

    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self._nodes) if n.op == "leaf"]

    def backward(self, output: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar `output` w.r.t. every node.

        Returns a map node-id -> gradient Tensor covering all leaves
        (zeros for leaves the output does not depend on) plus every
        intermediate node the gradient actually reached.
        """
        oid = self._by_tensor.get(id(output))
        if oid is None:
            raise ContractError("backward: output tensor is not on this tape")
        if output.size != 1:
            raise ContractError(
                f"backward requires a scalar output, got shape {output.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[oid] = np.ones_like(output.data)
        for idx in range(oid, -1, -1):
            node = self._nodes[idx]
            g = grads[idx]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                # No in-place mutation anywhere, so aliasing g is fine.
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        result: dict[int, Tensor] = {}
        for idx, node in enumerate(self._nodes):
            if node.op == "leaf":
                g = grads[idx]
                if g is None:
                    g = np.zeros_like(node.output.data)
                result[idx] = Tensor._wrap(np.asarray(g, dtype=node.output.dtype))
            elif grads[idx] is not None:
                result[idx] = Tensor._wrap(grads[idx])
        return result

    def replay(self) -> bool:
        """Recompute every non-leaf node from its parents.

        True iff every recomputed output is bit-identical to the cached
        one, which must hold for a complete, uncorrupted tape.
        """
        for node in self._nodes:
            if node.forward is None:
                continue
            recomputed = node.forward(*(self._nodes[p].output.data
                                        for p in node.parents))
            if not np.array_equal(
                    np.asarray(recomputed), node.output.data):
                return False
        return True


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------

def _record(op, parents, out_arr, backward, forward):
    out = Tensor._wrap(out_arr)
    tape = active_tape()
    if tape is not None:
        tape.record(op, parents, out, backward, forward)
    return out


def _check_trailing(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    if len(a_shape) >= len(b_shape) and \
            a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are not "
                     "equal and do not trailing-broadcast")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Sum the leading axes a trailing broadcast introduced.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a.shape, b.shape, "add")
    ash, bsh = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_reduce_to(g, ash), _reduce_to(g, bsh)),
                   lambda x, y: x + y)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a.shape, b.shape, "sub")
    ash, bsh = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_reduce_to(g, ash), -_reduce_to(g, bsh)),
                   lambda x, y: x - y)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_reduce_to(g * bd, ash), _reduce_to(g * ad, bsh)),
                   lambda x, y: x * y)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    sc = a.dtype.type(s)
    return _record("scale", (a,), a.data * sc,
                   lambda g: (g * sc,),
                   lambda x: x * sc)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two matrices, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd,
                   lambda g: (g @ bd.T, ad.T @ g),
                   lambda x, y: x @ y)


def bmm(a, b) -> Tensor:
    """Batched matrix product: (B,n,k) @ (B,k,m) -> (B,n,m)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm expects rank-3 inputs, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _record("bmm", (a, b), ad @ bd,
                   lambda g: (g @ bd.transpose(0, 2, 1),
                              ad.transpose(0, 2, 1) @ g),
                   lambda x, y: x @ y)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),),
                   lambda x: np.ascontiguousarray(x.transpose(axes)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    old = a.shape
    return _record("reshape", (a,), out,
                   lambda g: (g.reshape(old),),
                   lambda x: x.reshape(shape))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for i in range(len(sizes)):
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return grads

    return _record("concat", parts, out, backward,
                   lambda *xs: np.concatenate(list(xs), axis=axis))


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for "
                         f"axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    full_shape = a.shape

    def backward(g):
        buf = np.zeros(full_shape, dtype=g.dtype)
        buf[idx] = g
        return (buf,)

    return _record("slice", (a,), np.ascontiguousarray(a.data[idx]),
                   backward, lambda x: np.ascontiguousarray(x[idx]))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype)
    g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).astype(g.dtype)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    out = a.data.mean(axis=axis)
    inv = 1.0 / n
    return _record("mean", (a,), np.asarray(out),
                   lambda g: (_expand_reduced(g * g.dtype.type(inv), shape, axis),),
                   lambda x: np.asarray(x.mean(axis=axis)))


def tensor_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _record("sum", (a,), np.asarray(out),
                   lambda g: (_expand_reduced(g, shape, axis),),
                   lambda x: np.asarray(x.sum(axis=axis)))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    def forward(x):
        s = x - x.max(axis=axis, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=axis, keepdims=True)

    return _record("softmax", (a,), y, backward, forward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} "
                         f"do not match feature dim {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    def forward(x, gd, bd):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gd + bd

    return _record("layer_norm", (a, gain, bias), y, backward, forward)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du),)

    def forward(x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x ** 3)))

    return _record("gelu", (a,), y, backward, forward)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    y = x / n

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / n,)

    def forward(x):
        return x / np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)

    return _record("l2_normalize", (a,), y, backward, forward)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean())
    k = 2.0 / a.size

    def backward(g):
        d = g * diff * diff.dtype.type(k)
        return (d, -d)

    def forward(x, y):
        return np.asarray(((x - y) ** 2).mean())

    return _record("mse", (a, b), out, backward, forward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _record("exp", (a,), y, lambda g: (g * y,), np.exp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,), np.log)


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 exactly at c."""
    a = _as_tensor(a)
    c = float(c)
    x = a.data
    mask = (x > c).astype(x.dtype)
    return _record("maximum", (a,), np.maximum(x, c),
                   lambda g: (g * mask,),
                   lambda x: np.maximum(x, c))


def relu(a) -> Tensor:
    return maximum(a, 0.0)
