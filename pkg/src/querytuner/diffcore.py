"""Reverse-mode automatic differentiation over dense float64 matrices.

Every trainable piece of the system (attention blocks, MLPs, the variational
loss) is composed from the primitives in this module.  A ``Tape`` records
primitives in execution order (a Wengert list), so iterating the list in
reverse is a valid reverse topological order for ``backward``.  numpy supplies
storage and arithmetic; the differentiation bookkeeping lives here.

Tapes created with ``record=False`` compute forward values only, which keeps
inference hot paths cheap.  ``backward`` on such a tape is an error.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

Array = np.ndarray

# Additive pre-softmax sentinel for masked attention scores.  exp(-1e9 + s)
# underflows to exactly 0.0 in float64 for any realistic score s, so masked
# pairs get post-softmax weight exactly zero.
MASK_SENTINEL = -1e9

ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _as_value(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"matrices are 2-d, got shape {arr.shape}")
    return arr


class Matrix:
    """Handle to a float64 matrix living on a tape.

    ``value`` is the forward result; treat it as read-only.  Arithmetic
    operators record further primitives on the same tape.
    """

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: Array):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Matrix):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Matrix":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Matrix(shape={self.shape}, idx={self.idx})"


class Tape:
    """Ordered record of primitive operations.

    Inputs always precede outputs, so ``backward`` can sweep the node list
    once in reverse.  Parameter leaves remember the ``ParamStore`` name they
    came from; ``backward`` routes their gradients back into the store.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._values: list[Array] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable[[Array], tuple] | None] = []
        self._needs: list[bool] = []
        self._param_names: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value: Array, parents: tuple[int, ...] = (),
              vjp: Callable[[Array], tuple] | None = None,
              needs: bool | None = None) -> Matrix:
        if not self.record:
            return Matrix(self, -1, value)
        idx = len(self._values)
        if needs is None:
            needs = any(self._needs[p] for p in parents)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._needs.append(needs)
        return Matrix(self, idx, value)

    def constant(self, data) -> Matrix:
        """A leaf that never receives a gradient."""
        return self._push(_as_value(data))

    def variable(self, data) -> Matrix:
        """A leaf that participates in differentiation (handy for tests)."""
        return self._push(_as_value(data), needs=True)

    def parameter(self, store: "ParamStore", name: str) -> Matrix:
        """Leaf bound to a named store parameter; backward() accumulates there."""
        m = self._push(store.params[name], needs=True)
        if self.record:
            self._param_names[m.idx] = name
        return m


def _join(a: Matrix, b: Matrix) -> Tape:
    if a.tape is not b.tape:
        raise UsageError("operands were recorded on different tapes")
    return a.tape


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with gradient rules recorded on the tape."""
    tape = _join(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g: Array):
        return g @ bv.T, av.T @ g

    return tape._push(out, (a.idx, b.idx), vjp)


def transpose(m: Matrix) -> Matrix:
    return m.tape._push(m.value.T, (m.idx,), lambda g: (g.T,))


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; also accepts a row (1 x c) or column (r x 1) bias."""
    tape = _join(a, b)
    _broadcast_check(a.shape, b.shape, "add")
    val = a.value + b.value

    def vjp(g: Array):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return tape._push(val, (a.idx, b.idx), vjp)


def sub(a: Matrix, b: Matrix) -> Matrix:
    tape = _join(a, b)
    _broadcast_check(a.shape, b.shape, "sub")
    val = a.value - b.value

    def vjp(g: Array):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return tape._push(val, (a.idx, b.idx), vjp)


def _broadcast_check(sa, sb, opname) -> bool:
    ok = (
        sa == sb
        or (sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1))
        or (sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1))
    )
    if not ok:
        raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")
    return True


def _reduce_to(g: Array, shape: tuple[int, int]) -> Array:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Hadamard product of same-shape matrices."""
    tape = _join(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def vjp(g: Array):
        return g * bv, g * av

    return tape._push(av * bv, (a.idx, b.idx), vjp)


def div(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise quotient of same-shape matrices."""
    tape = _join(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes differ {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def vjp(g: Array):
        return g / bv, -g * av / (bv * bv)

    return tape._push(av / bv, (a.idx, b.idx), vjp)


def scale(m: Matrix, c: float) -> Matrix:
    return m.tape._push(m.value * c, (m.idx,), lambda g: (g * c,))


def mul_const(m: Matrix, factor: Array) -> Matrix:
    """Hadamard product with a fixed array that never receives a gradient."""
    if m.shape != factor.shape:
        raise ShapeError(f"mul_const: shapes differ {m.shape} vs {factor.shape}")
    return m.tape._push(m.value * factor, (m.idx,), lambda g: (g * factor,))


def add_const(m: Matrix, offset: Array) -> Matrix:
    """Shift by a fixed array that never receives a gradient."""
    if m.shape != offset.shape:
        raise ShapeError(f"add_const: shapes differ {m.shape} vs {offset.shape}")
    return m.tape._push(m.value + offset, (m.idx,), lambda g: (g,))


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ELEMENTWISE: dict[str, tuple[Callable[[Array], Array], Callable[[Array, Array], Array]]] = {
    # name -> (forward, d/dx expressed via (x, fwd_value))
    "tanh": (np.tanh, lambda x, v: 1.0 - v * v),
    "sigmoid": (_sigmoid, lambda x, v: v * (1.0 - v)),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda x, v: _sigmoid(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, v: (x > 0).astype(np.float64)),
    "log": (np.log, lambda x, v: 1.0 / x),
    "exp": (np.exp, lambda x, v: v),
}


def elementwise(op: str, m: Matrix) -> Matrix:
    """Apply a named scalar function elementwise, recording its gradient rule."""
    try:
        fwd, deriv = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    if op == "log" and np.any(m.value <= 0):
        raise DomainError("log requires strictly positive entries")
    val = fwd(m.value)
    x = m.value

    def vjp(g: Array):
        return (g * deriv(x, val),)

    return m.tape._push(val, (m.idx,), vjp)


def tanh(m: Matrix) -> Matrix:
    return elementwise("tanh", m)


def sigmoid(m: Matrix) -> Matrix:
    return elementwise("sigmoid", m)


def softplus(m: Matrix) -> Matrix:
    return elementwise("softplus", m)


def relu(m: Matrix) -> Matrix:
    return elementwise("relu", m)


def log(m: Matrix) -> Matrix:
    return elementwise("log", m)


def exp(m: Matrix) -> Matrix:
    return elementwise("exp", m)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    x = m.value
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array):
        dot = (g * val).sum(axis=1, keepdims=True)
        return (val * (g - dot),)

    return m.tape._push(val, (m.idx,), vjp)


def sum_all(m: Matrix) -> Matrix:
    r, c = m.shape

    def vjp(g: Array):
        return (np.full((r, c), g[0, 0]),)

    return m.tape._push(np.array([[m.value.sum()]]), (m.idx,), vjp)


def mean_rows(m: Matrix) -> Matrix:
    """Average over rows: (r x c) -> (1 x c)."""
    r = m.rows

    def vjp(g: Array):
        return (np.repeat(g / r, r, axis=0),)

    return m.tape._push(m.value.mean(axis=0, keepdims=True), (m.idx,), vjp)


def repeat_rows(m: Matrix, n: int) -> Matrix:
    """Tile a (1 x c) row to (n x c)."""
    if m.rows != 1:
        raise ShapeError(f"repeat_rows expects a single row, got {m.shape}")

    def vjp(g: Array):
        return (g.sum(axis=0, keepdims=True),)

    return m.tape._push(np.repeat(m.value, n, axis=0), (m.idx,), vjp)


def concat_rows(ms: Sequence[Matrix]) -> Matrix:
    if not ms:
        raise UsageError("concat_rows needs at least one matrix")
    tape = ms[0].tape
    cols = ms[0].cols
    for m in ms:
        if m.tape is not tape:
            raise UsageError("operands were recorded on different tapes")
        if m.cols != cols:
            raise ShapeError("concat_rows: column counts differ")
    sizes = [m.rows for m in ms]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return tape._push(np.vstack([m.value for m in ms]),
                      tuple(m.idx for m in ms), vjp)


def concat_cols(ms: Sequence[Matrix]) -> Matrix:
    if not ms:
        raise UsageError("concat_cols needs at least one matrix")
    tape = ms[0].tape
    rows = ms[0].rows
    for m in ms:
        if m.tape is not tape:
            raise UsageError("operands were recorded on different tapes")
        if m.rows != rows:
            raise ShapeError("concat_cols: row counts differ")
    sizes = [m.cols for m in ms]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Array):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return tape._push(np.hstack([m.value for m in ms]),
                      tuple(m.idx for m in ms), vjp)


def take_rows(m: Matrix, indices) -> Matrix:
    idx = np.asarray(indices, dtype=np.intp)
    r, c = m.shape

    def vjp(g: Array):
        out = np.zeros((r, c))
        np.add.at(out, idx, g)
        return (out,)

    return m.tape._push(m.value[idx], (m.idx,), vjp)


def backward(tape: Tape, output: Matrix, store: "ParamStore | None" = None) -> list[Array | None]:
    """Accumulate d(output)/d(node) for every tape node, in one reverse sweep.

    ``output`` must be 1x1.  Gradients of parameter leaves are added into
    ``store.grads`` when a store is given.  Returns the per-node gradient
    list (None for nodes the output does not depend on), which the test
    oracles use to inspect intermediate gradients.
    """
    if not tape.record:
        raise UsageError("backward() on a non-recording tape")
    if output.tape is not tape:
        raise UsageError("output was recorded on a different tape")
    if output.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar output, got {output.shape}")

    grads: list[Array | None] = [None] * len(tape)
    grads[output.idx] = np.ones((1, 1))
    needs = tape._needs
    for i in range(output.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        vjp = tape._vjps[i]
        if vjp is None:
            continue
        parents = tape._parents[i]
        if not any(needs[p] for p in parents):
            continue
        for parent, pg in zip(parents, vjp(g)):
            if pg is None or not needs[parent]:
                continue
            if grads[parent] is None:
                grads[parent] = pg.copy()
            else:
                grads[parent] += pg
    if store is not None:
        for idx, name in tape._param_names.items():
            if grads[idx] is not None:
                store.accumulate(name, grads[idx])
    return grads


class ParamStore:
    """Named parameter matrices with accumulated gradients and Adam moments.

    Weight matrices initialize uniform in +-sqrt(6 / (fan_in + fan_out)),
    biases at zero.  Gradients are zeroed by ``adam_step`` so each
    optimization step starts clean.
    """

    FORMAT = "querytuner-params-v1"

    def __init__(self):
        self.params: dict[str, Array] = {}
        self.grads: dict[str, Array] = {}
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}
        self.step_count = 0

    def create(self, name: str, rows: int, cols: int,
               rng: np.random.Generator | None = None, init: str = "glorot") -> Array:
        if name in self.params:
            raise UsageError(f"parameter {name!r} already exists")
        if init == "glorot":
            if rng is None:
                raise UsageError("glorot init needs an rng")
            limit = math.sqrt(6.0 / (rows + cols))
            value = rng.uniform(-limit, limit, size=(rows, cols))
        elif init == "zeros":
            value = np.zeros((rows, cols))
        else:
            raise UsageError(f"unknown init {init!r}")
        self.params[name] = value
        self.grads[name] = np.zeros((rows, cols))
        self._m[name] = np.zeros((rows, cols))
        self._v[name] = np.zeros((rows, cols))
        return value

    def accumulate(self, name: str, grad: Array) -> None:
        if grad.shape != self.params[name].shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameter shape "
                f"{self.params[name].shape} for {name!r}")
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self) -> list[str]:
        return list(self.params)

    def to_dict(self) -> dict:
        def pack(d: dict[str, Array]) -> dict:
            return {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in d.items()}

        return {"format": self.FORMAT, "step": self.step_count,
                "params": pack(self.params), "adam_m": pack(self._m),
                "adam_v": pack(self._v)}

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamStore":
        if payload.get("format") != cls.FORMAT:
            raise UsageError(f"unsupported checkpoint format {payload.get('format')!r}")

        def unpack(d: dict) -> dict[str, Array]:
            return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                    for k, v in d.items()}

        store = cls()
        store.params = unpack(payload["params"])
        store._m = unpack(payload["adam_m"])
        store._v = unpack(payload["adam_v"])
        store.grads = {k: np.zeros_like(v) for k, v in store.params.items()}
        store.step_count = int(payload["step"])
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def adam_step(store: ParamStore, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One adaptive-moment update over every parameter; zeroes the gradients."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grad()


def init_linear(store: ParamStore, prefix: str, in_dim: int, out_dim: int,
                rng: np.random.Generator) -> None:
    store.create(f"{prefix}.w", in_dim, out_dim, rng)
    store.create(f"{prefix}.b", 1, out_dim, init="zeros")


def linear(tape: Tape, store: ParamStore, prefix: str, x: Matrix) -> Matrix:
    w = tape.parameter(store, f"{prefix}.w")
    b = tape.parameter(store, f"{prefix}.b")
    return add(matmul(x, w), b)


def init_mlp(store: ParamStore, prefix: str, dims: Sequence[int],
             rng: np.random.Generator) -> None:
    """Create the layers of an MLP with relu between hidden layers."""
    for i in range(len(dims) - 1):
        init_linear(store, f"{prefix}.{i}", dims[i], dims[i + 1], rng)


def mlp(tape: Tape, store: ParamStore, prefix: str, x: Matrix, depth: int) -> Matrix:
    """Apply ``depth`` linear layers with relu between them (none after the last)."""
    out = x
    for i in range(depth):
        out = linear(tape, store, f"{prefix}.{i}", out)
        if i < depth - 1:
            out = relu(out)
    return out
