"""Tape-based reverse-mode differentiation over numpy-array-valued nodes.

The tape records a flat list of nodes in execution order; each node stores
its op kind, input node ids and cached value, so the backward sweep is a
single reversed pass.  Ops are array-valued rather than scalar-valued purely
for throughput: ``matvec``, reductions and the fused gather/segment ops keep
graphs small while the semantics stay those of an elementwise scalar graph.

Every op doubles as a plain numpy function: called on ndarrays it computes
the value without recording anything.  Network code is therefore written
once and runs either in recorded mode (training) or value mode (finite
differences, inference).

Precision contract: training runs in float32; gradient checks run the same
graph in float64.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np


class KinkWarning(UserWarning):
    """A rectifier was evaluated exactly at its kink during a gradient check."""


class ParamBlock:
    """Named parameter array with a gradient accumulator of equal shape.

    Gradients accumulate additively across ``backward`` calls until
    ``zero_grad`` is called.
    """

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values):
        values = np.array(values, copy=True)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float32)
        if values.size and not np.all(np.isfinite(values)):
            raise ValueError(f"ParamBlock {name!r}: non-finite initial values")
        self.name = name
        self.values = values
        self.grad = np.zeros_like(values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def astype(self, dtype) -> None:
        """Cast values in place (gradient is reset)."""
        self.values = self.values.astype(dtype)
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"ParamBlock({self.name!r}, shape={self.values.shape}, dtype={self.values.dtype})"


@dataclass(frozen=True)
class ScatterPlan:
    """Precomputed sort of a gather-index array, so the gather's backward
    (a scatter-add) runs as a sorted segment reduction instead of add.at."""

    order: np.ndarray        # argsort of the gather indices
    unique: np.ndarray       # unique gathered row ids, ascending
    starts: np.ndarray       # start of each unique id's run in `order`

    @staticmethod
    def for_indices(idx: np.ndarray) -> "ScatterPlan":
        order = np.argsort(idx, kind="stable")
        unique, starts = np.unique(idx[order], return_index=True)
        return ScatterPlan(order.astype(np.int64), unique.astype(np.int64), starts.astype(np.int64))


@dataclass(frozen=True)
class SegmentPlan:
    """Precomputed layout of a sorted segment-id array for segment_sum."""

    unique: np.ndarray       # unique segment ids present, ascending
    starts: np.ndarray       # start offsets of each segment's run
    num_segments: int

    @staticmethod
    def for_sorted_segments(seg: np.ndarray, num_segments: int) -> "SegmentPlan":
        if seg.size and np.any(np.diff(seg) < 0):
            raise ValueError("segment ids must be sorted ascending")
        unique, starts = np.unique(seg, return_index=True)
        return SegmentPlan(unique.astype(np.int64), starts.astype(np.int64), int(num_segments))


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.idx]

    @property
    def shape(self):
        return self.tape._values[self.idx].shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


class Tape:
    """Records ops for one forward pass; single-writer."""

    def __init__(self, dtype=np.float32, track_kinks: bool = False, kink_tol: float = 0.0):
        self.dtype = np.dtype(dtype)
        self.track_kinks = track_kinks
        self.kink_tol = kink_tol
        self.kink_hit = False
        self._ops: list[str] = []
        self._args: list[tuple] = []
        self._ctx: list = []
        self._values: list[np.ndarray] = []
        self._param_nodes: dict[int, ParamBlock] = {}
        self._adjoints: list | None = None

    # -- node construction ------------------------------------------------

    def _record(self, op: str, value: np.ndarray, args: tuple, ctx=None) -> Var:
        self._ops.append(op)
        self._args.append(args)
        self._ctx.append(ctx)
        self._values.append(value)
        return Var(self, len(self._values) - 1)

    def constant(self, x) -> Var:
        """Leaf with no gradient flow."""
        return self._record("const", np.asarray(x, dtype=self.dtype), ())

    def leaf(self, x) -> Var:
        """Differentiable leaf (use ``grad_of`` after backward)."""
        return self._record("leaf", np.asarray(x, dtype=self.dtype), ())

    def param(self, block: ParamBlock) -> Var:
        var = self._record("param", block.values.astype(self.dtype, copy=False), ())
        self._param_nodes[var.idx] = block
        return var

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("mixing Vars from different tapes")
            return x
        return self.constant(x)

    def __len__(self) -> int:
        return len(self._values)

    # -- backward ----------------------------------------------------------

    def backward(self, root: Var) -> None:
        """Accumulate d(root)/d(param) into every touched ParamBlock's grad.

        ``root`` must be scalar-valued.
        """
        if root.tape is not self:
            raise ValueError("root Var does not belong to this tape")
        if np.asarray(root.value).size != 1:
            raise ValueError(f"backward root must be scalar, got shape {np.shape(root.value)}")
        adj: list = [None] * len(self._values)
        adj[root.idx] = np.ones_like(self._values[root.idx])
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = self._ops[i]
            if op in ("const", "leaf"):
                continue
            if op == "param":
                block = self._param_nodes[i]
                block.grad += g.astype(block.grad.dtype, copy=False)
                continue
            _BACKWARD[op](self, i, g, adj)
        self._adjoints = adj

    def grad_of(self, var: Var) -> np.ndarray:
        """Adjoint of a leaf/intermediate node from the last backward call."""
        if self._adjoints is None:
            raise RuntimeError("backward has not been run on this tape")
        g = self._adjoints[var.idx]
        if g is None:
            return np.zeros_like(var.value)
        return g


def _accum(adj, idx, g):
    if adj[idx] is None:
        adj[idx] = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        adj[idx] = adj[idx] + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as e:
        raise ValueError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}") from e


# -- ops ---------------------------------------------------------------------
# Each op dispatches: pure numpy when no argument is a Var, recorded otherwise.

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        _check_broadcast(a, b, "add")
        return np.add(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_broadcast(a.value, b.value, "add")
    return tape._record("add", a.value + b.value, (a.idx, b.idx))


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        _check_broadcast(a, b, "sub")
        return np.subtract(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_broadcast(a.value, b.value, "sub")
    return tape._record("sub", a.value - b.value, (a.idx, b.idx))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        _check_broadcast(a, b, "mul")
        return np.multiply(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_broadcast(a.value, b.value, "mul")
    return tape._record("mul", a.value * b.value, (a.idx, b.idx))


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        _check_broadcast(a, b, "div")
        return np.divide(a, b)
    a, b = tape.lift(a), tape.lift(b)
    _check_broadcast(a.value, b.value, "div")
    return tape._record("div", a.value / b.value, (a.idx, b.idx))


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        if np.ndim(a) != 2 or np.ndim(b) != 2 or np.shape(a)[1] != np.shape(b)[0]:
            raise ValueError(f"matmul: shape mismatch {np.shape(a)} @ {np.shape(b)}")
        return np.asarray(a) @ np.asarray(b)
    a, b = tape.lift(a), tape.lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.value.shape} @ {b.value.shape}")
    return tape._record("matmul", a.value @ b.value, (a.idx, b.idx))


def matvec(a, v):
    tape = _tape_of(a, v)
    if tape is None:
        if np.ndim(a) != 2 or np.ndim(v) != 1 or np.shape(a)[1] != np.shape(v)[0]:
            raise ValueError(f"matvec: shape mismatch {np.shape(a)} @ {np.shape(v)}")
        return np.asarray(a) @ np.asarray(v)
    a, v = tape.lift(a), tape.lift(v)
    if a.value.ndim != 2 or v.value.ndim != 1 or a.value.shape[1] != v.value.shape[0]:
        raise ValueError(f"matvec: shape mismatch {a.value.shape} @ {v.value.shape}")
    return tape._record("matvec", a.value @ v.value, (a.idx, v.idx))


def relu(x):
    if not _is_var(x):
        return np.maximum(x, 0)
    tape = x.tape
    if tape.track_kinks and x.value.size and np.min(np.abs(x.value)) <= tape.kink_tol:
        tape.kink_hit = True
    return tape._record("relu", np.maximum(x.value, 0), (x.idx,))


def leaky_relu(x, slope: float = 0.01):
    if not _is_var(x):
        x = np.asarray(x)
        return np.where(x > 0, x, slope * x)
    tape = x.tape
    if tape.track_kinks and x.value.size and np.min(np.abs(x.value)) <= tape.kink_tol:
        tape.kink_hit = True
    v = np.where(x.value > 0, x.value, tape.dtype.type(slope) * x.value)
    return tape._record("leaky_relu", v, (x.idx,), slope)


def square(x):
    if not _is_var(x):
        return np.square(x)
    return x.tape._record("square", np.square(x.value), (x.idx,))


def vsum(x, axis=None):
    if not _is_var(x):
        return np.sum(x, axis=axis)
    return x.tape._record("sum", np.sum(x.value, axis=axis), (x.idx,), (axis, x.value.shape))


def mean(x, axis=None):
    if not _is_var(x):
        return np.mean(x, axis=axis)
    return x.tape._record("mean", np.mean(x.value, axis=axis), (x.idx,), (axis, x.value.shape))


def reshape(x, shape):
    if not _is_var(x):
        return np.reshape(x, shape)
    return x.tape._record("reshape", x.value.reshape(shape), (x.idx,), x.value.shape)


def transpose(x, axes):
    if not _is_var(x):
        return np.transpose(x, axes)
    return x.tape._record("transpose", np.transpose(x.value, axes), (x.idx,), tuple(axes))


def concat(xs, axis: int = 1):
    if not any(_is_var(x) for x in xs):
        return np.concatenate(xs, axis=axis)
    tape = _tape_of(*xs)
    xs = [tape.lift(x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    sizes = [x.value.shape[axis] for x in xs]
    return tape._record("concat", value, tuple(x.idx for x in xs), (axis, sizes))


def gather_rows(x, idx: np.ndarray, scatter_plan: ScatterPlan | None = None):
    """Row gather ``x[idx]``; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if not _is_var(x):
        return np.asarray(x)[idx]
    tape = x.tape
    return tape._record("gather", x.value[idx], (x.idx,), (idx, scatter_plan, x.value.shape))


def segment_sum(x, seg: np.ndarray, num_segments: int, plan: SegmentPlan | None = None):
    """Sum rows of ``x`` into ``num_segments`` bins given *sorted* segment ids.

    Absent segments yield zero rows.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if plan is None:
        plan = SegmentPlan.for_sorted_segments(seg, num_segments)
    if not _is_var(x):
        return _segsum_value(np.asarray(x), seg, plan)
    tape = x.tape
    return tape._record("segsum", _segsum_value(x.value, seg, plan), (x.idx,), (seg, plan))


def _segsum_value(x: np.ndarray, seg: np.ndarray, plan: SegmentPlan) -> np.ndarray:
    out = np.zeros((plan.num_segments,) + x.shape[1:], dtype=x.dtype)
    if seg.size:
        sums = np.add.reduceat(x, plan.starts, axis=0)
        out[plan.unique] = sums
    return out


# -- backward rules ------------------------------------------------------------

def _bw_add(tape, i, g, adj):
    a, b = tape._args[i]
    _accum(adj, a, _unbroadcast(g, tape._values[a].shape))
    _accum(adj, b, _unbroadcast(g, tape._values[b].shape))


def _bw_sub(tape, i, g, adj):
    a, b = tape._args[i]
    _accum(adj, a, _unbroadcast(g, tape._values[a].shape))
    _accum(adj, b, _unbroadcast(-g, tape._values[b].shape))


def _bw_mul(tape, i, g, adj):
    a, b = tape._args[i]
    av, bv = tape._values[a], tape._values[b]
    _accum(adj, a, _unbroadcast(g * bv, av.shape))
    _accum(adj, b, _unbroadcast(g * av, bv.shape))


def _bw_div(tape, i, g, adj):
    a, b = tape._args[i]
    av, bv = tape._values[a], tape._values[b]
    _accum(adj, a, _unbroadcast(g / bv, av.shape))
    _accum(adj, b, _unbroadcast(-g * av / (bv * bv), bv.shape))


def _bw_matmul(tape, i, g, adj):
    a, b = tape._args[i]
    av, bv = tape._values[a], tape._values[b]
    _accum(adj, a, g @ bv.T)
    _accum(adj, b, av.T @ g)


def _bw_matvec(tape, i, g, adj):
    a, v = tape._args[i]
    av, vv = tape._values[a], tape._values[v]
    _accum(adj, a, np.outer(g, vv))
    _accum(adj, v, av.T @ g)


def _bw_relu(tape, i, g, adj):
    (a,) = tape._args[i]
    _accum(adj, a, g * (tape._values[a] > 0))


def _bw_leaky_relu(tape, i, g, adj):
    (a,) = tape._args[i]
    slope = tape._ctx[i]
    av = tape._values[a]
    _accum(adj, a, g * np.where(av > 0, 1.0, slope).astype(av.dtype))


def _bw_square(tape, i, g, adj):
    (a,) = tape._args[i]
    _accum(adj, a, 2.0 * tape._values[a] * g)


def _bw_sum(tape, i, g, adj):
    (a,) = tape._args[i]
    axis, shape = tape._ctx[i]
    if axis is None:
        _accum(adj, a, np.broadcast_to(g, shape).astype(tape._values[a].dtype, copy=False))
    else:
        _accum(adj, a, np.broadcast_to(np.expand_dims(g, axis), shape))


def _bw_mean(tape, i, g, adj):
    (a,) = tape._args[i]
    axis, shape = tape._ctx[i]
    if axis is None:
        n = int(np.prod(shape))
        _accum(adj, a, np.broadcast_to(g / n, shape).astype(tape._values[a].dtype, copy=False))
    else:
        n = shape[axis]
        _accum(adj, a, np.broadcast_to(np.expand_dims(g / n, axis), shape))


def _bw_reshape(tape, i, g, adj):
    (a,) = tape._args[i]
    _accum(adj, a, g.reshape(tape._ctx[i]))


def _bw_transpose(tape, i, g, adj):
    (a,) = tape._args[i]
    axes = tape._ctx[i]
    inverse = np.argsort(axes)
    _accum(adj, a, np.transpose(g, inverse))


def _bw_concat(tape, i, g, adj):
    axis, sizes = tape._ctx[i]
    offset = 0
    for a, size in zip(tape._args[i], sizes):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offset, offset + size)
        _accum(adj, a, g[tuple(sl)])
        offset += size


def _bw_gather(tape, i, g, adj):
    (a,) = tape._args[i]
    idx, plan, src_shape = tape._ctx[i]
    out = np.zeros(src_shape, dtype=g.dtype)
    if idx.size:
        if plan is None:
            np.add.at(out, idx, g)
        else:
            sums = np.add.reduceat(g[plan.order], plan.starts, axis=0)
            out[plan.unique] = sums
    _accum(adj, a, out)


def _bw_segsum(tape, i, g, adj):
    (a,) = tape._args[i]
    seg, _plan = tape._ctx[i]
    _accum(adj, a, g[seg])


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "matmul": _bw_matmul,
    "matvec": _bw_matvec,
    "relu": _bw_relu,
    "leaky_relu": _bw_leaky_relu,
    "square": _bw_square,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "concat": _bw_concat,
    "gather": _bw_gather,
    "segsum": _bw_segsum,
}


# -- gradient checking ---------------------------------------------------------

def gradcheck(loss_fn, blocks, eps: float = 1e-5, value_fn=None, processes: int = 1) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn(tape) -> Var`` builds the loss on a fresh tape from the current
    block values; ``value_fn() -> float`` (optional) is a faster value-only
    evaluation used for the difference quotients.  Blocks are checked in
    float64 (values are cast up and restored).  Returns the max over all
    parameters of ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.

    Rectifier inputs that land exactly on the kink during the nominal
    forward pass raise a ``KinkWarning`` (the comparison still runs).
    """
    saved = [(b.values, b.grad) for b in blocks]
    try:
        for b in blocks:
            b.values = b.values.astype(np.float64)
            b.grad = np.zeros_like(b.values)
        tape = Tape(dtype=np.float64, track_kinks=True, kink_tol=2.0 * eps)
        root = loss_fn(tape)
        base = float(np.asarray(root.value))
        if not np.isfinite(base):
            raise ValueError(f"gradcheck: non-finite loss {base}")
        if tape.kink_hit:
            warnings.warn(
                "loss evaluated a rectifier exactly at 0; finite differences are unreliable there",
                KinkWarning,
                stacklevel=2,
            )
        tape.backward(root)
        grads = [b.grad.copy() for b in blocks]

        if value_fn is None:
            def value_fn():
                t = Tape(dtype=np.float64)
                return float(np.asarray(loss_fn(t).value))

        jobs = [(bi, i) for bi, b in enumerate(blocks) for i in range(b.size)]
        fd = _fd_gradients(value_fn, blocks, jobs, eps, processes)

        max_rel = 0.0
        k = 0
        for bi, b in enumerate(blocks):
            ga = grads[bi].ravel()
            for i in range(b.size):
                gf = fd[k]
                denom = max(abs(ga[i]), abs(gf), 1e-8)
                max_rel = max(max_rel, abs(ga[i] - gf) / denom)
                k += 1
        return max_rel
    finally:
        for b, (values, grad) in zip(blocks, saved):
            b.values = values
            b.grad = grad


def _fd_gradients(value_fn, blocks, jobs, eps, processes) -> np.ndarray:
    if processes <= 1 or len(jobs) < 64:
        return _fd_chunk(value_fn, blocks, jobs, eps)
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    chunks = np.array_split(np.arange(len(jobs)), processes)
    with ctx.Pool(processes) as pool:
        parts = pool.starmap(
            _fd_chunk,
            [(value_fn, blocks, [jobs[i] for i in chunk], eps) for chunk in chunks],
        )
    return np.concatenate(parts)


def _fd_chunk(value_fn, blocks, jobs, eps) -> np.ndarray:
    out = np.empty(len(jobs))
    for k, (bi, i) in enumerate(jobs):
        flat = blocks[bi].values.ravel()
        orig = flat[i]
        flat[i] = orig + eps
        hi = value_fn()
        flat[i] = orig - eps
        lo = value_fn()
        flat[i] = orig
        out[k] = (hi - lo) / (2.0 * eps)
    return out


# -- weight serialization -------------------------------------------------------

_WEIGHT_MAGIC = b"PCWT"


def save_weights(path, blocks) -> None:
    """Write blocks as magic, header length, JSON header, float32 payload."""
    header = json.dumps(
        [{"name": b.name, "shape": list(b.values.shape)} for b in blocks],
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_WEIGHT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blocks:
            f.write(b.values.astype("<f4").tobytes())


def load_weights(path) -> list[ParamBlock]:
    with open(path, "rb") as f:
        data = f.read()
    return loads_weights(data)


def loads_weights(data: bytes) -> list[ParamBlock]:
    if data[:4] != _WEIGHT_MAGIC:
        raise ValueError("not a weight file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    blocks = []
    for entry in header:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        blocks.append(ParamBlock(entry["name"], values))
    return blocks


def dumps_weights(blocks) -> bytes:
    header = json.dumps(
        [{"name": b.name, "shape": list(b.values.shape)} for b in blocks],
        sort_keys=True,
    ).encode("utf-8")
    parts = [_WEIGHT_MAGIC, struct.pack("<I", len(header)), header]
    parts += [b.values.astype("<f4").tobytes() for b in blocks]
    return b"".join(parts)
