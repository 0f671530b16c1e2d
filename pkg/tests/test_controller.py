import numpy as np
import pytest

from flmn import diffmath as dm
from flmn import memnet
from flmn.controller import (ControllerConfig, assemble_episode_graph, controller_step,
                             init_controller_state, init_memory, init_params, model_step,
                             param_shapes, zero_params)
from flmn.memnet import MemoryConfig
from flmn.oracle import dense_lstm_step


def tiny(kind="flmn", C=2, H=5, rows=8, width=6, image=7):
    return ControllerConfig(kind, image, C, H, MemoryConfig(rows=rows, width=width))


def test_init_params_deterministic():
    cfg = tiny()
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert list(a) == list(b)
    for n in a:
        assert a[n].tobytes() == b[n].tobytes()
    assert a["alpha"] == 0.0


def test_init_params_seed_matters():
    cfg = tiny()
    a, b = init_params(cfg, 1), init_params(cfg, 2)
    assert any(not np.array_equal(a[n], b[n]) for n in a)


def test_init_params_bounds():
    cfg = tiny()
    shapes = param_shapes(cfg)
    p = init_params(cfg, 3)
    fan = shapes["lstm.W_i"][0]
    assert np.abs(p["lstm.W_i"]).max() <= 1 / np.sqrt(fan)
    assert np.abs(p["lstm.b_i"]).max() <= 1 / np.sqrt(fan)


def test_zero_hidden_rejected():
    with pytest.raises(ValueError):
        ControllerConfig("flmn", 400, 5, 0)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        ControllerConfig("ntm", 400, 5, 10)
    with pytest.raises(ValueError):
        assemble_episode_graph("ntm", 3, tiny())


def test_fair_memory_budget():
    f, m = tiny("flmn", rows=128, width=40), tiny("mann", rows=128, width=40)
    assert f.memory.stored_scalars("flmn") == m.memory.stored_scalars("mann")
    ef = assemble_episode_graph("flmn", 2, f)
    em = assemble_episode_graph("mann", 2, m)
    sizes = []
    for eg in (ef, em):
        mats = [r for r in eg.graph.records if r.kind == "const" and len(r.shape) == 2
                and r.shape[0] in (64, 128) and r.shape[1] == 40]
        sizes.append(sum(int(np.prod(r.shape)) for r in mats))
    assert sizes[0] == sizes[1] == 128 * 40


def _single_step(cfg, params, image, label):
    g = dm.Graph()
    pn = {n: g.input(n, v) for n, v in params.items()}
    cs = init_controller_state(g, cfg)
    ms = init_memory(g, cfg)
    cs, ms, logits = model_step(cfg, cs, ms, g.const(image), g.const(label), pn)
    return cs, ms, logits


def test_zero_everything_gives_uniform_logits():
    cfg = tiny()
    _, _, logits = _single_step(cfg, zero_params(cfg), np.zeros(7), np.zeros(2))
    assert np.ptp(logits.value) == 0.0


def test_controller_matches_dense_lstm(rng):
    cfg = tiny()
    params = init_params(cfg, 4)
    image, label = rng.random(7), np.eye(2)[1]
    g = dm.Graph()
    pn = {n: g.input(n, v) for n, v in params.items()}
    h0, c0, r0 = rng.normal(size=5), rng.normal(size=5), rng.normal(size=cfg.read_width)
    from flmn.controller import ControllerState
    state = ControllerState(g.const(h0), g.const(c0), g.const(r0))
    h, c, iface = controller_step(state, g.const(image), g.const(label), pn)
    W = {k: params[f"lstm.W_{k}"] for k in "ifog"}
    b = {k: params[f"lstm.b_{k}"] for k in "ifog"}
    h_ref, c_ref = dense_lstm_step(np.concatenate([image, label, r0]), h0, c0, W, b)
    np.testing.assert_allclose(h.value, h_ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(c.value, c_ref, atol=1e-9, rtol=0)
    np.testing.assert_allclose(iface.key.value, np.tanh(h_ref @ params["iface.W_k"] + params["iface.b_k"]),
                               atol=1e-9)


def test_returned_state_is_a_value(rng):
    cfg = tiny()
    params = init_params(cfg, 4)
    snapshot = {n: v.copy() for n, v in params.items()}
    image = rng.random(7)
    cs, _, first = _single_step(cfg, params, image, np.zeros(2))
    first = first.value.copy()
    cs.h.value[...] = 99.0
    cs.r_prev.value[...] = 99.0
    for n in params:
        np.testing.assert_array_equal(params[n], snapshot[n])
    _, _, again = _single_step(cfg, params, image, np.zeros(2))
    np.testing.assert_array_equal(again.value, first)


def test_single_step_loss_is_chance_with_zero_params():
    cfg = tiny(C=4)
    eg = assemble_episode_graph("flmn", 1, cfg)
    feed = eg.feed(zero_params(cfg), np.random.default_rng(0).random((1, 7)), np.zeros((1, 4)), [2])
    assert dm.evaluate(eg.graph, feed, eg.loss) == pytest.approx(np.log(4), abs=1e-12)


@pytest.mark.parametrize("kind", ["flmn", "mann"])
def test_episode_graph_grad_check(kind):
    cfg = ControllerConfig(kind, 5, 2, 3, MemoryConfig(rows=8, width=6))
    eg = assemble_episode_graph(kind, 3, cfg)
    rng = np.random.default_rng(0)
    params = init_params(cfg, 1)
    params["alpha"] = np.array(0.4)
    labels = rng.integers(0, 2, 3)
    offset = np.zeros((3, 2))
    offset[np.arange(1, 3), labels[:-1]] = 1
    feed = eg.feed(params, rng.random((3, 5)), offset, labels)
    report = dm.grad_check(eg.graph, eg.loss, feed, wrt=eg.param_names, tolerance=1e-3)
    assert report.passed, report.errors


def test_prediction_ignores_own_label(rng):
    cfg = tiny(C=3)
    T = 4
    eg = assemble_episode_graph("flmn", T, cfg, batch=2)
    params = init_params(cfg, 0)
    images = rng.random((2, T, 7))
    targets = rng.integers(0, 3, (2, T))
    offset = np.zeros((2, T, 3))
    for t in range(1, T):
        offset[np.arange(2), t, targets[:, t - 1]] = 1
    base = dm.evaluate(eg.graph, eg.feed(params, images, offset, targets), eg.logits)
    # drop y_2 from the stream: it enters at step 3 only
    cut = offset.copy()
    cut[:, 3] = 0
    out = dm.evaluate(eg.graph, eg.feed(params, images, cut, targets), eg.logits)
    for t in range(3):
        assert out[t].tobytes() == base[t].tobytes()
    assert not np.array_equal(out[3], base[3])


def test_back_to_back_episodes_identical(rng):
    cfg = tiny()
    eg = assemble_episode_graph("flmn", 5, cfg, batch=1)
    params = init_params(cfg, 2)
    feed = eg.feed(params, rng.random((1, 5, 7)), np.zeros((1, 5, 2)), rng.integers(0, 2, (1, 5)))
    a = dm.evaluate(eg.graph, feed, eg.logits)
    other = eg.feed(params, rng.random((1, 5, 7)), np.zeros((1, 5, 2)), rng.integers(0, 2, (1, 5)))
    dm.evaluate(eg.graph, other, eg.logits)
    b = dm.evaluate(eg.graph, feed, eg.logits)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_logits_track_planted_label():
    C, W = 3, 3
    cfg = ControllerConfig("flmn", 4, C, 2, MemoryConfig(rows=6, width=W, label_width=C))
    params = zero_params(cfg)
    # head: pass-through on the read block, nothing from h
    params["head.W"][cfg.hidden:, :] = np.eye(C)
    # key bias picks a direction; a_l is zero so no new label lands
    params["iface.b_k"] = np.array([1.0, 0.0, 0.0])
    g = dm.Graph()
    pn = {n: g.input(n, v) for n, v in params.items()}
    ms = init_memory(g, cfg)
    Mf = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    for planted in range(C):
        Ml = np.zeros((3, C))
        Ml[0, planted] = 5.0
        state = memnet.MemoryState(g.const(Mf), g.const(Ml), ms.w_r, ms.w_u, ms.w_lu, ms.w_wf)
        _, _, logits = model_step(cfg, init_controller_state(g, cfg), state,
                                  g.const(np.zeros(4)), g.const(np.zeros(C)), pn)
        assert int(np.argmax(logits.value)) == planted
