"""Built-in check suite: memory ops against the dense reference, gradient
checks and invariants. Used by ``flmn selftest``.

Every check draws from fixed seeds, so the report is identical run to run.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import memnet, oracle
from .controller import ControllerConfig, assemble_episode_graph, init_params
from .memnet import MemoryConfig


@dataclass
class GroupResult:
    name: str
    passed: bool
    detail: str


def _max_diff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def check_read(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        k = rng.normal(size=6)
        M_f = rng.normal(size=(8, 6))
        M_l = rng.normal(size=(8, 3))
        sims = memnet.cosine_keys(k, M_f)
        ref = [oracle.cosine(k, row, 1e-8) for row in M_f]
        w = memnet.read_weights(sims)
        worst = max(worst, _max_diff(sims, ref), _max_diff(w, oracle.softmax(ref)),
                    _max_diff(memnet.read_label(w, M_l), sum(w[i] * M_l[i] for i in range(8))))
    return worst < 1e-12, f"max |diff| {worst:.2e}"


def check_usage(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        u, wf, wr = rng.random(8), rng.random(8), rng.random(8)
        gamma = float(rng.uniform(0.5, 0.99))
        worst = max(worst, _max_diff(memnet.update_usage(u, wf, wr, gamma),
                                     oracle.usage(u, wf, wr, gamma)))
        ties = np.array([0.3, 0.1, 0.1, 0.5])
        lu = memnet.least_used(ties)
        worst = max(worst, _max_diff(lu, oracle.argmin_first(ties)))
    return worst < 1e-12, f"max |diff| {worst:.2e}"


def check_write(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        M = rng.normal(size=(6, 4))
        lu = np.eye(6)[int(rng.integers(6))]
        w_r = rng.dirichlet(np.ones(6))
        alpha = float(rng.normal())
        gate = 1.0 / (1.0 + np.exp(-alpha))
        w_wf = memnet.feature_write_weights(w_r, lu, alpha)
        worst = max(worst, _max_diff(w_wf, gate * w_r + (1 - gate) * lu))
        a = rng.normal(size=4)
        ref = M * (1 - lu)[:, None] + np.outer(w_wf, a)
        worst = max(worst, _max_diff(memnet.write_feature(M, lu, w_wf, a), ref))
        L = rng.normal(size=(6, 3))
        al = rng.normal(size=3)
        worst = max(worst, _max_diff(memnet.write_label(L, w_wf, al), L + np.outer(w_wf, al)))
    return worst < 1e-12, f"max |diff| {worst:.2e}"


def check_traces(rng) -> tuple[bool, str]:
    worst = 0.0
    for kind in ("flmn", "mann"):
        for _ in range(3):
            cfg = MemoryConfig(rows=8, width=5, gamma=0.9, label_width=3 if kind == "flmn" else None)
            T = 12
            keys = rng.normal(size=(T, 5))
            adds = rng.normal(size=(T, 5))
            labels = rng.normal(size=(T, 3))
            alpha = float(rng.normal())
            trace = memnet.run_trace(kind, cfg, keys, adds, labels if kind == "flmn" else None, alpha)
            rows = cfg.flmn_rows if kind == "flmn" else cfg.rows
            ref = oracle.DenseMemory(rows, 5, 3 if kind == "flmn" else None, gamma=0.9,
                                     alpha=alpha, split=kind == "flmn")
            for t in range(T):
                r = ref.step(keys[t], adds[t], labels[t] if kind == "flmn" else None)
                snap = ref.snapshot()
                worst = max(worst, _max_diff(trace[t]["r"], r),
                            *(_max_diff(trace[t][k], v) for k, v in snap.items()))
    return worst < 1e-9, f"max |diff| {worst:.2e}"


def check_gradients(rng) -> tuple[bool, str]:
    worst = 0.0
    for kind in ("flmn", "mann"):
        cfg = ControllerConfig(kind, 5, 2, 3, MemoryConfig(rows=4 if kind == "flmn" else 8, width=6))
        eg = assemble_episode_graph(kind, 3, cfg)
        params = init_params(cfg, int(rng.integers(1 << 30)))
        params["alpha"] = np.array(0.3)
        labels = rng.integers(0, 2, 3)
        offset = np.zeros((3, 2))
        offset[np.arange(1, 3), labels[:-1]] = 1
        feed = eg.feed(params, rng.random((3, 5)), offset, labels)
        report = dm.grad_check(eg.graph, eg.loss, feed, wrt=eg.param_names, tolerance=1e-3)
        worst = max(worst, report.max_error)
    return worst < 1e-3, f"max rel err {worst:.2e}"


def check_invariants(rng) -> tuple[bool, str]:
    failures = []
    for _ in range(50):
        n = int(rng.integers(2, 10))
        w = memnet.read_weights(rng.normal(size=n) * 20)
        if abs(w.sum() - 1) > 1e-12 or (w < 0).any():
            failures.append("read weights off the simplex")
        lu = memnet.least_used(rng.random(n))
        if lu.sum() != 1 or set(np.unique(lu)) - {0.0, 1.0}:
            failures.append("least-used not one-hot")
        w_r = rng.dirichlet(np.ones(n))
        wf = memnet.feature_write_weights(w_r, lu, float(rng.uniform(-5, 5)))
        if abs(wf.sum() - 1) > 1e-12 or (wf < 0).any():
            failures.append("write weights not convex")
        L = rng.normal(size=(n, 3))
        untouched = wf == 0
        if not np.array_equal(memnet.write_label(L, wf, rng.normal(size=3))[untouched], L[untouched]):
            failures.append("label write touched unweighted rows")
    return not failures, failures[0] if failures else "ok"


GROUPS = [
    ("cosine/read", check_read),
    ("usage", check_usage),
    ("write", check_write),
    ("trace oracle", check_traces),
    ("gradients", check_gradients),
    ("invariants", check_invariants),
]


@contextlib.contextmanager
def _mutated(name: str | None):
    """Deliberately break one equation, to prove the suite notices."""
    if name is None:
        yield
        return
    if name != "usage":
        raise ValueError(f"unknown mutation {name!r}")
    original = memnet.update_usage

    @dm.lift
    def bad_usage(w_u_prev, w_wf, w_r, gamma):
        return dm.add(dm.add(dm.scale(w_u_prev, gamma + 0.01), w_wf), w_r)

    memnet.update_usage = bad_usage
    try:
        yield
    finally:
        memnet.update_usage = original


def run_selftest(mutate: str | None = None, seed: int = 20240) -> list[GroupResult]:
    results = []
    with _mutated(mutate):
        for i, (name, fn) in enumerate(GROUPS):
            rng = np.random.default_rng([seed, i])
            try:
                ok, detail = fn(rng)
            except Exception as e:  # a crash is a failure of that group
                ok, detail = False, f"{type(e).__name__}: {e}"
            results.append(GroupResult(name, bool(ok), detail))
    return results


def format_report(results: list[GroupResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<13} {r.detail}" for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} groups passed")
    return "\n".join(lines)
