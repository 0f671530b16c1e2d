"""Small reverse-mode differentiation engine over float64 numpy arrays.

A :class:`Graph` is recorded eagerly: every primitive applied to a
:class:`Node` computes its value immediately and appends a record to the
graph. The recorded graph can then be replayed with new bindings for its
named inputs (:func:`evaluate`) and differentiated (:func:`gradient`).

Only the primitives the memory networks need are provided. Batch dimensions
are handled with numpy broadcasting rules for ``add``/``mul`` and batched
``matmul``; everything else works on the last axis (or last two axes).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

COSINE_EPS = 1e-8

KINDS = (
    "input", "const",
    "matmul", "add", "mul", "concat", "sigmoid", "tanh", "softmax",
    "cosine_rows", "scale", "one_minus", "sum", "cross_entropy",
    # shape plumbing and non-differentiable bookkeeping
    "reshape", "argmin_onehot",
)


class GraphError(ValueError):
    """Raised for malformed graphs; carries the offending node id and kind."""

    def __init__(self, message: str, node: int | None = None, kind: str | None = None):
        self.node = node
        self.kind = kind
        where = f" [node {node}, {kind}]" if node is not None else ""
        super().__init__(message + where)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Node:
    """Handle to one node of a graph. ``value`` is the build-time value."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.graph._values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.records[self.id].shape

    @property
    def kind(self) -> str:
        return self.graph.records[self.id].kind

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"


class Graph:
    def __init__(self):
        self.records: list[_Record] = []
        self._values: list[np.ndarray] = []
        self.inputs: dict[str, int] = {}

    def __len__(self):
        return len(self.records)

    def input(self, name: str, value) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        value = np.array(value, dtype=np.float64)
        node = self._push("input", (), value, name=name)
        self.inputs[name] = node.id
        return node

    def const(self, value) -> Node:
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        return self._push("const", (), value)

    def _push(self, kind, inputs, value, attrs=None, name=None) -> Node:
        rec = _Record(kind, tuple(inputs), tuple(np.shape(value)), attrs or {}, name)
        self.records.append(rec)
        self._values.append(value)
        return Node(self, len(self.records) - 1)

    def node(self, name: str) -> Node:
        return Node(self, self.inputs[name])


# --------------------------------------------------------------------------
# shape rules, forward and backward rules per primitive


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape_matmul(a, b, attrs):
    if len(a) < 1 or len(b) < 2 or a[-1] != b[-2]:
        raise ShapeError(f"matmul shapes {a} and {b} do not align")
    if len(a) == 1:
        return tuple(b[:-2]) + (b[-1],)
    try:
        batch = np.broadcast_shapes(a[:-2], b[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch shapes {a} and {b} do not broadcast") from None
    return tuple(batch) + (a[-2], b[-1])


def _shape_broadcast(a, b, attrs):
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} do not broadcast") from None


def _shape_same(a, attrs):
    return a


def _shape_concat(*args):
    shapes = args[:-1]
    lead = shapes[0][:-1]
    for s in shapes:
        if len(s) == 0 or s[:-1] != lead:
            raise ShapeError(f"concat shapes {shapes} differ outside the last axis")
    return lead + (int(np.sum([s[-1] for s in shapes])),)


def _shape_cosine(k, m, attrs):
    if len(m) < 2 or k[-1] != m[-1] or k[:-1] != m[:-2]:
        raise ShapeError(f"cosine_rows key {k} vs matrix {m}")
    return m[:-1]


def _shape_sum(a, attrs):
    axis = attrs["axis"]
    if axis is None:
        return ()
    if not -len(a) <= axis < len(a):
        raise ShapeError(f"sum axis {axis} out of range for {a}")
    return tuple(n for i, n in enumerate(a) if i != axis % len(a))


def _shape_ce(logits, target, attrs):
    if logits != target or len(logits) == 0:
        raise ShapeError(f"cross_entropy logits {logits} vs targets {target}")
    return logits[:-1]


def _shape_reshape(a, attrs):
    shape = attrs["shape"]
    if int(np.prod(shape)) != int(np.prod(a)):
        raise ShapeError(f"cannot reshape {a} to {shape}")
    return tuple(shape)


def _shape_last_axis(a, attrs):
    if len(a) == 0:
        raise ShapeError("needs at least one axis")
    return a


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _cosine(k, m, eps):
    kn = np.sqrt((k * k).sum(-1))
    mn = np.sqrt((m * m).sum(-1))
    dots = np.einsum("...m,...nm->...n", k, m)
    return dots / ((kn[..., None] + eps) * (mn + eps))


def _fwd_argmin(x):
    out = np.zeros_like(x)
    idx = np.argmin(x, axis=-1)  # first occurrence wins ties
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


_FORWARD: dict[str, Callable] = {
    "matmul": lambda a, b, at: np.matmul(a, b),
    "add": lambda a, b, at: a + b,
    "mul": lambda a, b, at: a * b,
    "concat": lambda *xs: np.concatenate(xs[:-1], axis=-1),
    "sigmoid": lambda a, at: _sigmoid(a),
    "tanh": lambda a, at: np.tanh(a),
    "softmax": lambda a, at: _softmax(a),
    "cosine_rows": lambda k, m, at: _cosine(k, m, at["eps"]),
    "scale": lambda a, at: a * at["c"],
    "one_minus": lambda a, at: 1.0 - a,
    "sum": lambda a, at: np.asarray(a.sum(axis=at["axis"])),
    "cross_entropy": lambda lg, t, at: -(t * _log_softmax(lg)).sum(axis=-1),
    "reshape": lambda a, at: a.reshape(at["shape"]),
    "argmin_onehot": lambda a, at: _fwd_argmin(a),
}

_SHAPE: dict[str, Callable] = {
    "matmul": _shape_matmul,
    "add": _shape_broadcast,
    "mul": _shape_broadcast,
    "concat": _shape_concat,
    "sigmoid": _shape_same,
    "tanh": _shape_same,
    "softmax": _shape_last_axis,
    "cosine_rows": _shape_cosine,
    "scale": _shape_same,
    "one_minus": _shape_same,
    "sum": _shape_sum,
    "cross_entropy": _shape_ce,
    "reshape": _shape_reshape,
    "argmin_onehot": _shape_last_axis,
}


def _bwd_matmul(g, ins, out, at):
    a, b = ins
    if a.ndim == 1:
        ga = np.matmul(g[..., None, :], np.swapaxes(b, -1, -2))[..., 0, :]
        gb = a[:, None] * g[..., None, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _bwd_concat(g, ins, out, at):
    splits = np.cumsum([x.shape[-1] for x in ins])[:-1]
    return tuple(np.split(g, splits, axis=-1))


def _bwd_softmax(g, ins, out, at):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _bwd_cosine(g, ins, out, at):
    k, m = ins
    eps = at["eps"]
    kn = np.sqrt((k * k).sum(-1))            # (...)
    mn = np.sqrt((m * m).sum(-1))            # (..., N)
    a = kn + eps
    b = mn + eps
    dots = np.einsum("...m,...nm->...n", k, m)
    khat = k / np.where(kn > 0, kn, 1.0)[..., None]
    mhat = m / np.where(mn > 0, mn, 1.0)[..., None]
    coef = g / (a[..., None] * b)            # dL/d(dot)
    gk = np.einsum("...n,...nm->...m", coef, m)
    # d/d|k| of dots/(a b) = -dots / (a^2 b)
    gk -= (g * dots / (a[..., None] ** 2 * b)).sum(-1)[..., None] * khat
    gm = coef[..., None] * k[..., None, :]
    gm -= (g * dots / (a[..., None] * b * b))[..., None] * mhat
    return gk, gm


def _bwd_sum(g, ins, out, at):
    (a,) = ins
    axis = at["axis"]
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _bwd_ce(g, ins, out, at):
    lg, t = ins
    ls = _log_softmax(lg)
    tsum = t.sum(axis=-1, keepdims=True)
    glg = (np.exp(ls) * tsum - t) * g[..., None]
    gt = -ls * g[..., None]
    return glg, gt


_BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": lambda g, ins, out, at: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
    "mul": lambda g, ins, out, at: (_unbroadcast(g * ins[1], ins[0].shape),
                                    _unbroadcast(g * ins[0], ins[1].shape)),
    "concat": _bwd_concat,
    "sigmoid": lambda g, ins, out, at: (g * out * (1.0 - out),),
    "tanh": lambda g, ins, out, at: (g * (1.0 - out * out),),
    "softmax": _bwd_softmax,
    "cosine_rows": _bwd_cosine,
    "scale": lambda g, ins, out, at: (g * at["c"],),
    "one_minus": lambda g, ins, out, at: (-g,),
    "sum": _bwd_sum,
    "cross_entropy": _bwd_ce,
    "reshape": lambda g, ins, out, at: (g.reshape(ins[0].shape),),
    "argmin_onehot": lambda g, ins, out, at: (None,),
}


# --------------------------------------------------------------------------
# building primitives


def _graph_of(args) -> Graph:
    for a in args:
        if isinstance(a, Node):
            return a.graph
    raise GraphError("primitive needs at least one Node operand")


def _as_node(g: Graph, x) -> Node:
    if isinstance(x, Node):
        if x.graph is not g:
            raise GraphError("operands belong to different graphs")
        return x
    return g.const(x)


def _apply(kind: str, *args, **attrs) -> Node:
    g = _graph_of(args)
    nodes = [_as_node(g, a) for a in args]
    shapes = [g.records[n.id].shape for n in nodes]
    try:
        shape = _SHAPE[kind](*shapes, attrs)
    except ShapeError as e:
        raise ShapeError(str(e), len(g.records), kind) from None
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value = _FORWARD[kind](*(g._values[n.id] for n in nodes), attrs)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("non-finite value produced", len(g.records), kind)
    assert value.shape == shape, (kind, value.shape, shape)
    return g._push(kind, [n.id for n in nodes], value, attrs)


def matmul(a, b) -> Node:
    return _apply("matmul", a, b)


def add(a, b) -> Node:
    return _apply("add", a, b)


def mul(a, b) -> Node:
    return _apply("mul", a, b)


def concat(xs: Sequence) -> Node:
    return _apply("concat", *xs)


def sigmoid(a) -> Node:
    return _apply("sigmoid", a)


def tanh(a) -> Node:
    return _apply("tanh", a)


def softmax(a) -> Node:
    return _apply("softmax", a)


def cosine_rows(k, m, eps: float = COSINE_EPS) -> Node:
    """Cosine similarity of ``k`` (..., M) against every row of ``m`` (..., N, M).

    Each norm is guarded by adding ``eps`` so zero rows give similarity 0.
    """
    return _apply("cosine_rows", k, m, eps=float(eps))


def scale(a, c: float) -> Node:
    return _apply("scale", a, c=float(c))


def one_minus(a) -> Node:
    return _apply("one_minus", a)


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    return _apply("sum", a, axis=axis)


def cross_entropy(logits, targets) -> Node:
    """Per-row ``-sum(targets * log_softmax(logits))`` over the last axis."""
    return _apply("cross_entropy", logits, targets)


def reshape(a, shape: Sequence[int]) -> Node:
    return _apply("reshape", a, shape=tuple(int(s) for s in shape))


def argmin_onehot(a) -> Node:
    """One-hot of the minimum along the last axis, lowest index on ties. No gradient."""
    return _apply("argmin_onehot", a)


# --------------------------------------------------------------------------
# replay and differentiation


def _bind(graph: Graph, inputs) -> list:
    values = list(graph._values)
    for name, val in (inputs or {}).items():
        if name not in graph.inputs:
            raise GraphError(f"unknown input {name!r}")
        nid = graph.inputs[name]
        arr = np.asarray(val, dtype=np.float64)
        if arr.shape != graph.records[nid].shape:
            raise ShapeError(f"input {name!r} has shape {arr.shape}, "
                             f"graph expects {graph.records[nid].shape}", nid, "input")
        values[nid] = arr
    return values


def _forward(graph: Graph, values: list, stop: int | None = None) -> None:
    recs = graph.records
    end = len(recs) if stop is None else stop + 1
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        _replay(recs, values, end)


def _replay(recs, values, end):
    for i in range(end):
        rec = recs[i]
        if rec.kind in ("input", "const"):
            continue
        out = _FORWARD[rec.kind](*(values[j] for j in rec.inputs), rec.attrs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite value produced", i, rec.kind)
        values[i] = out


def _ids(nodes) -> list[int]:
    return [n.id if isinstance(n, Node) else int(n) for n in nodes]


def evaluate(graph: Graph, inputs: dict | None = None, outputs=None):
    """Replay ``graph`` with new bindings for its named inputs.

    ``outputs`` may be a single node, a sequence of nodes, or ``None`` (all
    node values as a list). The graph itself is not modified.
    """
    values = _bind(graph, inputs)
    _forward(graph, values)
    if outputs is None:
        return values
    if isinstance(outputs, (Node, int)):
        return values[_ids([outputs])[0]]
    return [values[i] for i in _ids(outputs)]


def forward_backward(graph: Graph, loss, inputs: dict | None = None,
                     wrt: Iterable[str] | None = None, outputs=()):
    """One forward and one reverse sweep.

    Returns ``(output values, grads)`` where grads maps each name in ``wrt``
    (default: every named input) to d loss / d input.
    """
    loss_id = _ids([loss])[0]
    if graph.records[loss_id].shape != ():
        raise GraphError("loss must be a scalar", loss_id, graph.records[loss_id].kind)
    values = _bind(graph, inputs)
    _forward(graph, values)

    names = list(graph.inputs) if wrt is None else list(wrt)
    for n in names:
        if n not in graph.inputs:
            raise GraphError(f"unknown input {n!r}")
    recs = graph.records
    needs = [False] * (loss_id + 1)
    for n in names:
        if graph.inputs[n] <= loss_id:
            needs[graph.inputs[n]] = True
    for i in range(loss_id + 1):
        rec = recs[i]
        if rec.inputs and rec.kind != "argmin_onehot":
            needs[i] = any(needs[j] for j in rec.inputs)

    grads: list = [None] * (loss_id + 1)
    grads[loss_id] = np.ones(())
    for i in range(loss_id, -1, -1):
        g = grads[i]
        rec = recs[i]
        if g is None or not needs[i] or not rec.inputs:
            continue
        ins = [values[j] for j in rec.inputs]
        parts = _BACKWARD[rec.kind](g, ins, values[i], rec.attrs)
        for j, gj in zip(rec.inputs, parts):
            if gj is None or not needs[j]:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj

    out = {}
    for n in names:
        nid = graph.inputs[n]
        g = grads[nid] if nid <= loss_id else None
        out[n] = np.zeros(recs[nid].shape) if g is None else np.array(g, dtype=np.float64)
    return [values[i] for i in _ids(outputs)], out


def gradient(graph: Graph, loss, inputs: dict | None = None,
             wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    return forward_backward(graph, loss, inputs, wrt)[1]


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(graph: Graph, loss, inputs: dict | None = None,
               wrt: Iterable[str] | None = None, tolerance: float = 1e-4,
               step: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The error for each element is ``|a - n| / max(|a|, |n|, floor)``; the
    report keeps the maximum per named input.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    loss_id = _ids([loss])[0]
    base = {n: np.array(graph._values[i]) for n, i in graph.inputs.items()}
    base.update({n: np.array(v, dtype=np.float64) for n, v in (inputs or {}).items()})
    names = list(graph.inputs) if wrt is None else list(wrt)
    analytic = gradient(graph, loss, base, names)

    def f(binding):
        return float(evaluate(graph, binding, loss_id))

    errors = {}
    for n in names:
        x = base[n]
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + step
            fp = f(base)
            flat[idx] = old - step
            fm = f(base)
            flat[idx] = old
            num.reshape(-1)[idx] = (fp - fm) / (2 * step)
        a = analytic[n]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        errors[n] = float((np.abs(a - num) / denom).max()) if a.size else 0.0
    return GradCheckReport(errors, tolerance)


def lift(fn):
    """Let a graph-building function also take plain arrays.

    When no argument is a :class:`Node`, array-like positional arguments are
    wrapped as constants of a fresh graph and the result's value is returned.
    """
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, Node) for a in list(args) + list(kwargs.values())):
            return fn(*args, **kwargs)
        g = Graph()
        args = [g.const(a) if isinstance(a, (list, tuple, np.ndarray)) else a for a in args]
        out = fn(*args, **kwargs)
        return out.value if isinstance(out, Node) else out

    return wrapper
