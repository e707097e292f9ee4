"""Reverse-mode automatic differentiation over dense float64 tensors.

The graph is recorded on an explicit tape: every operation appends its output
node in creation order, and the gradient pass walks the node list in exact
reverse creation order (which is automatically a topological order). Values
live in numpy arrays; an operation on vectors of N particles is a single node,
so the tape stays short even for large scenes.

Everything is float64. Any operation that produces a NaN or Inf while a tape
is active raises ``NonFiniteError`` identifying the offending node.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "active_tape",
    "constant",
    "parameter",
    "coord_jacobian",
    "accumulate_grad",
    "record",
]


class NonFiniteError(RuntimeError):
    """A forward value became NaN/Inf; the current step must be aborted."""


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of operations, replayed backwards for gradients.

    Use as a context manager. Gradients accumulate into ``.grad`` of leaf
    tensors (parameters/inputs); intermediate node gradients are cleared at
    the end of each backward sweep so the tape can keep recording and be
    swept again.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, out: "Tensor", seed: float = 1.0) -> None:
        """Accumulate d(seed * out)/d(leaf) into every reachable leaf's .grad."""
        if out.data.size != 1:
            raise ValueError("backward root must be a scalar (size-1) tensor")
        if out.grad is None:
            out.grad = np.full_like(out.data, float(seed))
        else:
            out.grad = out.grad + float(seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node._vjp is not None:
                node._vjp(node.grad)
        for node in self.nodes:
            node.grad = None

    def grad(self, out: "Tensor", inputs) -> list[np.ndarray]:
        """Gradient of a scalar ``out`` with respect to each tensor in ``inputs``.

        Rejects non-scalar outputs and detached inputs. Existing ``.grad``
        content on the inputs is discarded, not accumulated into.
        """
        inputs = list(inputs)
        for x in inputs:
            if not x.requires_grad:
                raise ValueError("grad() input is detached (requires_grad=False)")
        for x in inputs:
            x.grad = None
        self.backward(out)
        return [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]


class Tensor:
    """A float64 array plus the bookkeeping needed for the backward sweep."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, op="detach")

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic sugar ----------------------------------------------------
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

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor, handling broadcast shapes."""
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def record(out_data: np.ndarray, parents, vjp, op: str) -> Tensor:
    """Create an op output, attach it to the active tape if gradients are needed.

    ``vjp(g)`` must accumulate into the parents via ``accumulate_grad``. This is
    also the entry point for fused custom operations (hash-grid interpolation,
    the rasterizer) whose backward rules are hand-written.
    """
    tape = active_tape()
    parents = tuple(parents)
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, op=op)
    if tape is not None:
        if tape.check_finite and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(
                f"non-finite value in op '{op}' (node {len(tape.nodes)}; "
                f"parents: {[p.op for p in parents]})"
            )
        if needs:
            out._parents = parents
            out._vjp = vjp
            tape.nodes.append(out)
    return out


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return record(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return record(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return record(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        accumulate_grad(a, g / b.data)
        accumulate_grad(b, -g * a.data / (b.data * b.data))

    return record(a.data / b.data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        accumulate_grad(a, -g)

    return record(-a.data, (a,), vjp, "neg")


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def vjp(g):
        accumulate_grad(a, g * p * a.data ** (p - 1.0))

    return record(a.data**p, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        accumulate_grad(a, g * out_data)

    return record(out_data, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        accumulate_grad(a, g / a.data)

    return record(np.log(a.data), (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        accumulate_grad(a, g * 0.5 / out_data)

    return record(out_data, (a,), vjp, "sqrt")


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        accumulate_grad(a, g * np.cos(a.data))

    return record(np.sin(a.data), (a,), vjp, "sin")


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        accumulate_grad(a, -g * np.sin(a.data))

    return record(np.cos(a.data), (a,), vjp, "cos")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        accumulate_grad(a, g * (1.0 - out_data * out_data))

    return record(out_data, (a,), vjp, "tanh")


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _sigmoid_stable(a.data)

    def vjp(g):
        accumulate_grad(a, g * out_data * (1.0 - out_data))

    return record(out_data, (a,), vjp, "sigmoid")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        accumulate_grad(a, g * mask)

    return record(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)

    def vjp(g):
        accumulate_grad(a, g * sgn)

    return record(np.abs(a.data), (a,), vjp, "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi] (boundary passes)."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        accumulate_grad(a, g * mask)

    return record(np.clip(a.data, lo, hi), (a,), vjp, "clip")


def where(mask, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def vjp(g):
        accumulate_grad(a, g * mask)
        accumulate_grad(b, g * ~mask)

    return record(np.where(mask, a.data, b.data), (a, b), vjp, "where")


# -- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            accumulate_grad(a, np.broadcast_to(gg, a.data.shape))

    return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            accumulate_grad(a, np.broadcast_to(g / n, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            accumulate_grad(a, np.broadcast_to(gg / n, a.data.shape))

    return record(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


# -- linear algebra / shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # inner product
            accumulate_grad(a, g * bd)
            accumulate_grad(b, g * ad)
            return
        ga = gb = None
        if ad.ndim == 1:  # (k,) @ (..., k, n)
            ga = (np.expand_dims(g, -2) @ np.swapaxes(bd, -1, -2)).reshape(g.shape[:-1] + ad.shape)
            gb = np.expand_dims(ad, -1) * np.expand_dims(g, -2)
        elif bd.ndim == 1:  # (..., m, k) @ (k,)
            ga = np.expand_dims(g, -1) * np.expand_dims(bd, -2)
            gb = np.swapaxes(ad, -1, -2) @ np.expand_dims(g, -1)
            gb = gb.reshape(gb.shape[:-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        accumulate_grad(a, _unbroadcast(ga, ad.shape))
        accumulate_grad(b, _unbroadcast(gb, bd.shape))

    return record(a.data @ b.data, (a, b), vjp, "matmul")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def vjp(g):
        accumulate_grad(a, g.reshape(old))

    return record(a.data.reshape(shape), (a,), vjp, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        accumulate_grad(a, np.swapaxes(g, ax1, ax2))

    return record(np.swapaxes(a.data, ax1, ax2), (a,), vjp, "swapaxes")


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        accumulate_grad(a, buf)

    return record(a.data[key], (a,), vjp, "getitem")


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0 with an integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        accumulate_grad(a, buf)

    return record(a.data[idx], (a,), vjp, "take_rows")


def concatenate(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate_grad(p, g[tuple(sl)])

    return record(np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat")


def stack(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]

    def vjp(g):
        for i, p in enumerate(parts):
            accumulate_grad(p, np.take(g, i, axis=axis))

    return record(np.stack([p.data for p in parts], axis=axis), parts, vjp, "stack")


# -- coordinate Jacobian -----------------------------------------------------


def coord_jacobian(field_fn, point) -> np.ndarray:
    """Jacobian of a field over (x, y, z, t) at one point, as a (k, 4) matrix.

    ``field_fn`` maps a length-4 Tensor to a length-k Tensor built from
    differentiable primitives. Implemented as k reverse passes; the contract
    is the matrix, not the method. The point must lie in [0, 1]^4.
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape != (4,):
        raise ValueError("coord_jacobian expects a single (x, y, z, t) point")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("coordinate outside [0,1]^4")
    leaf = parameter(p)
    with Tape() as tape:
        out = field_fn(leaf)
        if out.data.ndim != 1:
            out = reshape(out, (-1,))
        k = out.data.shape[0]
        rows = np.zeros((k, 4))
        for i in range(k):
            leaf.grad = None
            tape.backward(out[i])
            if leaf.grad is not None:
                rows[i] = leaf.grad
    return rows
