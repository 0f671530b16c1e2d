"""External memories: split feature/label memory (FLMN) and the single-matrix
LRUA memory used by the MANN baseline.

Every operation builds diffmath nodes, so the same code serves training
graphs and direct numerical use (pass plain arrays and get arrays back).
Shapes carry an optional leading batch axis: vectors are ``(..., N)``,
matrices ``(..., N, width)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffmath as dm
from .diffmath import Node, lift

INIT_VALUE = 1e-6


@dataclass(frozen=True)
class MemoryConfig:
    """Memory budget.

    ``rows`` is the total number of memory locations N. MANN uses one
    N x width matrix; FLMN splits it into a feature and a label memory of
    N/2 rows each. ``label_width`` defaults to ``width``, which keeps the
    stored-scalar count of both models equal.
    """

    rows: int = 128
    width: int = 40
    gamma: float = 0.95
    init_value: float = INIT_VALUE
    label_width: int | None = None
    eps: float = dm.COSINE_EPS

    def __post_init__(self):
        if self.rows <= 0 or self.width <= 0:
            raise ValueError("memory rows and width must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.label_width is not None and self.label_width <= 0:
            raise ValueError("label_width must be positive")

    @property
    def flmn_rows(self) -> int:
        if self.rows % 2:
            raise ValueError(f"FLMN needs an even row budget, got {self.rows}")
        return self.rows // 2

    @property
    def label_cols(self) -> int:
        return self.width if self.label_width is None else self.label_width

    def stored_scalars(self, kind: str) -> int:
        if kind == "mann":
            return self.rows * self.width
        return self.flmn_rows * (self.width + self.label_cols)


@dataclass(frozen=True)
class MemoryState:
    """Memory contents and addressing weights after one step.

    ``M_l`` is ``None`` for the single-matrix (MANN) memory. ``w_wf`` is the
    write weight of the step that produced this state (all zero initially).
    """

    M_f: Node
    M_l: Node | None
    w_r: Node
    w_u: Node
    w_lu: Node
    w_wf: Node
    w_wl: Node | None = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).value for k in self.__dataclass_fields__
                if getattr(self, k) is not None}


@dataclass(frozen=True)
class InterfaceVectors:
    key: Node
    add_feature: Node
    add_label: Node | None = None


def init_state(g: dm.Graph, rows: int, width: int, label_width: int | None = None,
               batch: tuple[int, ...] = (), init_value: float = INIT_VALUE) -> MemoryState:
    """Fresh memory: matrices at ``init_value``, uniform read/usage weights,
    least-used one-hot at row 0, no previous write."""
    batch = tuple(batch)
    uniform = np.full(batch + (rows,), 1.0 / rows)
    lu = np.zeros(batch + (rows,))
    lu[..., 0] = 1.0
    M_l = None
    if label_width is not None:
        M_l = g.const(np.full(batch + (rows, label_width), init_value))
    return MemoryState(
        M_f=g.const(np.full(batch + (rows, width), init_value)),
        M_l=M_l,
        w_r=g.const(uniform),
        w_u=g.const(uniform),
        w_lu=g.const(lu),
        w_wf=g.const(np.zeros(batch + (rows,))),
        w_wl=None if label_width is None else g.const(np.zeros(batch + (rows,))),
    )


def _outer(w: Node, a: Node) -> Node:
    # (..., N) x (..., W) -> (..., N, W)
    col = dm.reshape(w, w.shape + (1,))
    row = dm.reshape(a, a.shape[:-1] + (1, a.shape[-1]))
    return dm.matmul(col, row)


@lift
def cosine_keys(k, M_f, eps: float = dm.COSINE_EPS):
    return dm.cosine_rows(k, M_f, eps)


@lift
def read_weights(similarities):
    return dm.softmax(similarities)


@lift
def read_label(w_r, M_l):
    row = dm.reshape(w_r, w_r.shape[:-1] + (1, w_r.shape[-1]))
    r = dm.matmul(row, M_l)
    return dm.reshape(r, r.shape[:-2] + (r.shape[-1],))


@lift
def update_usage(w_u_prev, w_wf, w_r, gamma: float):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return dm.add(dm.add(dm.scale(w_u_prev, gamma), w_wf), w_r)


@lift
def least_used(w_u):
    return dm.argmin_onehot(w_u)


@lift
def feature_write_weights(w_r_prev, w_lu_prev, alpha):
    """Gate between the previously read rows and the previously least-used row."""
    if w_r_prev.shape != w_lu_prev.shape:
        raise dm.ShapeError(f"w_r {w_r_prev.shape} vs w_lu {w_lu_prev.shape}")
    gate = dm.sigmoid(alpha if isinstance(alpha, Node) else w_r_prev.graph.const(alpha))
    return dm.add(dm.mul(gate, w_r_prev), dm.mul(dm.one_minus(gate), w_lu_prev))


@lift
def write_feature(M_f_prev, w_lu_prev, w_wf, a_f):
    """Zero the previously least-used row, then add ``a_f`` under ``w_wf``."""
    keep = dm.one_minus(w_lu_prev)
    cleared = dm.mul(M_f_prev, dm.reshape(keep, keep.shape + (1,)))
    return dm.add(cleared, _outer(w_wf, a_f))


def label_write_weights(w_wf_prev, rows: int | None = None, batch: tuple[int, ...] = ()):
    """Label write weights are the previous step's feature write weights.

    With no previous step (``w_wf_prev is None``) the result is all zeros.
    """
    if w_wf_prev is None:
        if rows is None:
            raise ValueError("rows is required when there is no previous write")
        return np.zeros(tuple(batch) + (rows,))
    return w_wf_prev


@lift
def write_label(M_l_prev, w_wl, a_l):
    return dm.add(M_l_prev, _outer(w_wl, a_l))


def flmn_memory_step(state: MemoryState, iface: InterfaceVectors, config: MemoryConfig,
                     alpha) -> tuple[MemoryState, Node]:
    """One FLMN memory step; returns the new state and the label read ``r``.

    Order: the label of the previous input is written first (to where that
    input's feature went), then the feature memory is read with the key, then
    the feature write and usage update happen.
    """
    w_wl = label_write_weights(state.w_wf)
    M_l = write_label(state.M_l, w_wl, iface.add_label)
    w_r = read_weights(cosine_keys(iface.key, state.M_f, config.eps))
    r = read_label(w_r, M_l)
    w_wf = feature_write_weights(state.w_r, state.w_lu, alpha)
    M_f = write_feature(state.M_f, state.w_lu, w_wf, iface.add_feature)
    w_u = update_usage(state.w_u, w_wf, w_r, config.gamma)
    w_lu = least_used(w_u)
    return MemoryState(M_f, M_l, w_r, w_u, w_lu, w_wf, w_wl), r


def mann_memory_step(state: MemoryState, key, add, config: MemoryConfig,
                     alpha) -> tuple[MemoryState, Node]:
    """LRUA step on a single matrix: read with ``key``, then clear and write ``add``."""
    w_r = read_weights(cosine_keys(key, state.M_f, config.eps))
    r = read_label(w_r, state.M_f)
    w_wf = feature_write_weights(state.w_r, state.w_lu, alpha)
    M = write_feature(state.M_f, state.w_lu, w_wf, add)
    w_u = update_usage(state.w_u, w_wf, w_r, config.gamma)
    w_lu = least_used(w_u)
    return replace(state, M_f=M, w_r=w_r, w_u=w_u, w_lu=w_lu, w_wf=w_wf), r


def run_trace(kind: str, config: MemoryConfig, keys, adds_f, adds_l=None, alpha: float = 0.0):
    """Run a scripted sequence of interface vectors through a memory.

    ``keys``/``adds_*`` are arrays with a leading time axis. Returns the list
    of per-step state value dicts (with ``"r"`` added).
    """
    g = dm.Graph()
    keys = np.asarray(keys, dtype=float)
    rows = config.flmn_rows if kind == "flmn" else config.rows
    label_w = config.label_cols if kind == "flmn" else None
    state = init_state(g, rows, config.width, label_w, keys.shape[1:-1], config.init_value)
    a = g.const(alpha)
    out = []
    for t in range(len(keys)):
        k = g.const(keys[t])
        af = g.const(adds_f[t])
        if kind == "flmn":
            state, r = flmn_memory_step(state, InterfaceVectors(k, af, g.const(adds_l[t])), config, a)
        elif kind == "mann":
            state, r = mann_memory_step(state, k, af, config, a)
        else:
            raise ValueError(f"unknown memory kind {kind!r}")
        vals = state.values()
        vals["r"] = r.value
        out.append(vals)
    return out
