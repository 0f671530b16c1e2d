"""LSTM controller and the unrolled episode model for FLMN and MANN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import Node
from .memnet import (InterfaceVectors, MemoryConfig, MemoryState, flmn_memory_step,
                     init_state, mann_memory_step)

MODEL_KINDS = ("flmn", "mann")
GATES = ("i", "f", "o", "g")

ParamSet = dict  # name -> np.ndarray, insertion ordered


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "flmn"
    image_width: int = 400
    n_classes: int = 5
    hidden: int = 200
    memory: MemoryConfig = field(default_factory=MemoryConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unsupported model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("image_width", "n_classes", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def read_width(self) -> int:
        return self.memory.label_cols if self.kind == "flmn" else self.memory.width

    @property
    def input_width(self) -> int:
        return self.image_width + self.n_classes + self.read_width

    @property
    def rows(self) -> int:
        return self.memory.flmn_rows if self.kind == "flmn" else self.memory.rows


def param_shapes(config: ControllerConfig) -> dict[str, tuple[int, ...]]:
    H, M = config.hidden, config.memory.width
    z = config.input_width + H
    shapes: dict[str, tuple[int, ...]] = {}
    for gname in GATES:
        shapes[f"lstm.W_{gname}"] = (z, H)
        shapes[f"lstm.b_{gname}"] = (H,)
    shapes["iface.W_k"] = (H, M)
    shapes["iface.b_k"] = (M,)
    shapes["iface.W_af"] = (H, M)
    shapes["iface.b_af"] = (M,)
    if config.kind == "flmn":
        shapes["iface.W_al"] = (H, config.memory.label_cols)
        shapes["iface.b_al"] = (config.memory.label_cols,)
    shapes["head.W"] = (H + config.read_width, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    shapes["alpha"] = ()
    return shapes


def init_params(config: ControllerConfig, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; alpha = 0."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) % 2**64))
    shapes = param_shapes(config)
    params: ParamSet = {}
    for name, shape in shapes.items():
        if name == "alpha":
            params[name] = np.zeros(())
            continue
        weight = name.replace(".b_", ".W_").replace("head.b", "head.W")
        fan_in = shapes[weight][0]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_params(config: ControllerConfig) -> ParamSet:
    return {n: np.zeros(s) for n, s in param_shapes(config).items()}


@dataclass(frozen=True)
class ControllerState:
    h: Node
    c: Node
    r_prev: Node


def init_controller_state(g: dm.Graph, config: ControllerConfig,
                          batch: tuple[int, ...] = ()) -> ControllerState:
    batch = tuple(batch)
    return ControllerState(g.const(np.zeros(batch + (config.hidden,))),
                           g.const(np.zeros(batch + (config.hidden,))),
                           g.const(np.zeros(batch + (config.read_width,))))


def controller_step(state: ControllerState, image, offset_label, params: dict[str, Node],
                    kind: str = "flmn"):
    """LSTM update on ``[image, offset_label, r_prev, h_prev]`` followed by the
    interface projections. Returns ``(h, c, InterfaceVectors)``; the new
    ``r_prev`` is filled in once the memory has been read."""
    z = dm.concat([image, offset_label, state.r_prev, state.h])
    pre = {gname: dm.add(dm.matmul(z, params[f"lstm.W_{gname}"]), params[f"lstm.b_{gname}"])
           for gname in GATES}
    i = dm.sigmoid(pre["i"])
    f = dm.sigmoid(pre["f"])
    o = dm.sigmoid(pre["o"])
    cand = dm.tanh(pre["g"])
    c = dm.add(dm.mul(f, state.c), dm.mul(i, cand))
    h = dm.mul(o, dm.tanh(c))

    key = dm.tanh(dm.add(dm.matmul(h, params["iface.W_k"]), params["iface.b_k"]))
    a_f = dm.add(dm.matmul(h, params["iface.W_af"]), params["iface.b_af"])
    a_l = None
    if kind == "flmn":
        a_l = dm.add(dm.matmul(h, params["iface.W_al"]), params["iface.b_al"])
    return h, c, InterfaceVectors(key, a_f, a_l)


def classify(h: Node, r: Node, params: dict[str, Node]) -> Node:
    return dm.add(dm.matmul(dm.concat([h, r]), params["head.W"]), params["head.b"])


def model_step(config: ControllerConfig, cstate: ControllerState, mstate: MemoryState,
               image, offset_label, params: dict[str, Node]):
    """Controller, memory and classifier for one time step.

    Returns ``(controller state, memory state, logits)``.
    """
    h, c, iface = controller_step(cstate, image, offset_label, params, config.kind)
    if config.kind == "flmn":
        mstate, r = flmn_memory_step(mstate, iface, config.memory, params["alpha"])
    else:
        mstate, r = mann_memory_step(mstate, iface.key, iface.add_feature,
                                     config.memory, params["alpha"])
    logits = classify(h, r, params)
    return ControllerState(h, c, r), mstate, logits


def init_memory(g: dm.Graph, config: ControllerConfig, batch=()) -> MemoryState:
    label_w = config.memory.label_cols if config.kind == "flmn" else None
    return init_state(g, config.rows, config.memory.width, label_w, batch,
                      config.memory.init_value)


@dataclass
class EpisodeGraph:
    """Unrolled graph over one episode for a fixed batch size.

    Named inputs: every parameter name, plus ``x/t``, ``y/t`` (offset label)
    and ``target/t`` (one-hot true label) for each step ``t``.
    """

    config: ControllerConfig
    steps: int
    batch: int | None
    graph: dm.Graph
    loss: Node
    logits: list[Node]
    step_losses: list[Node]

    @property
    def param_names(self) -> list[str]:
        return list(param_shapes(self.config))

    def feed(self, params: ParamSet, images, offset_labels, targets) -> dict[str, np.ndarray]:
        """Bind parameters and a batch (arrays with a time axis after the batch axis)."""
        C = self.config.n_classes
        feed = dict(params)
        onehot = np.eye(C)[np.asarray(targets)]
        for t in range(self.steps):
            feed[f"x/{t}"] = images[..., t, :]
            feed[f"y/{t}"] = offset_labels[..., t, :]
            feed[f"target/{t}"] = onehot[..., t, :]
        return feed


def assemble_episode_graph(kind: str, steps: int, config: ControllerConfig,
                           batch: int | None = None) -> EpisodeGraph:
    """Unroll ``steps`` model steps with a per-step cross-entropy loss.

    The loss is the per-step cross-entropy summed over time and averaged over
    the batch. The prediction at step ``t`` is scored against the label of
    ``x_t``, which the model only sees at ``t + 1``.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unsupported model kind {kind!r}")
    if steps < 1:
        raise ValueError("episode length must be >= 1")
    if config.kind != kind:
        config = ControllerConfig(kind, config.image_width, config.n_classes,
                                  config.hidden, config.memory)
    bshape = () if batch is None else (batch,)
    g = dm.Graph()
    params = {n: g.input(n, np.zeros(s)) for n, s in param_shapes(config).items()}
    cstate = init_controller_state(g, config, bshape)
    mstate = init_memory(g, config, bshape)
    C = config.n_classes
    logits, step_losses = [], []
    total = None
    for t in range(steps):
        x = g.input(f"x/{t}", np.zeros(bshape + (config.image_width,)))
        y = g.input(f"y/{t}", np.zeros(bshape + (C,)))
        target = g.input(f"target/{t}", np.full(bshape + (C,), 1.0 / C))
        cstate, mstate, lg = model_step(config, cstate, mstate, x, y, params)
        ce = dm.cross_entropy(lg, target)
        if batch is not None:
            ce = dm.sum(ce)
        logits.append(lg)
        step_losses.append(ce)
        total = ce if total is None else dm.add(total, ce)
    loss = dm.scale(total, 1.0 / (batch or 1))
    return EpisodeGraph(config, steps, batch, g, loss, logits, step_losses)
