"""Training, evaluation, metrics logging and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffmath as dm
from .controller import ControllerConfig, ParamSet, assemble_episode_graph, init_params
from .episodes import (AugmentationSpec, ClassLibrary, EpisodeBatch, make_episode_batch,
                       synthetic_library)
from .memnet import MemoryConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FLMNCKPT"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    model: str = "flmn"
    dataset: str = "synthetic"
    episodes: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    classes_per_episode: int = 5
    samples_per_class: int = 10
    memory_rows: int = 128
    memory_width: int = 40
    label_width: int = 0  # 0: one column per class
    hidden_width: int = 200
    gamma: float = 0.95
    seed: int = 0
    eval_every: int = 500
    eval_episodes: int = 500
    checkpoint_every: int = 0
    augment: bool = False
    data_seed: int = 0
    train_classes: int = 1209
    synthetic_classes: int = 25
    synthetic_test_classes: int = 25
    synthetic_samples: int = 20
    synthetic_noise: float = 0.1
    synthetic_density: float = 0.5
    data_root: str = ""
    mnist_images: str = ""
    mnist_labels: str = ""

    def __post_init__(self):
        if self.model not in ("flmn", "mann"):
            raise ValueError(f"model must be flmn or mann, got {self.model!r}")
        positive = ("episodes", "batch_size", "classes_per_episode", "samples_per_class",
                    "memory_rows", "memory_width", "hidden_width", "eval_every", "eval_episodes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.label_width < 0:
            raise ValueError("label_width must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.model == "flmn" and self.memory_rows % 2:
            raise ValueError("memory_rows must be even for flmn")

    def model_config(self) -> ControllerConfig:
        mem = MemoryConfig(rows=self.memory_rows, width=self.memory_width, gamma=self.gamma,
                           label_width=self.label_width or self.classes_per_episode)
        return ControllerConfig(self.model, 400, self.classes_per_episode, self.hidden_width, mem)

    def augmentation(self) -> AugmentationSpec | None:
        return AugmentationSpec() if self.augment else None


def benchmark_config(model: str = "flmn", seed: int = 0, episodes: int = 5000, **overrides) -> TrainConfig:
    """The desk-scale synthetic setting: 25 training classes, 5-way, 10 shots,
    batch 16, metrics every 500 episodes.

    Sizes and learning rate come from a small tuning sweep; see the README.
    """
    base = dict(model=model, dataset="synthetic", episodes=episodes, batch_size=16,
                learning_rate=BENCHMARK_LR, classes_per_episode=5, samples_per_class=10,
                memory_rows=128, memory_width=20, hidden_width=50, seed=seed,
                eval_every=500, eval_episodes=500, synthetic_classes=25, synthetic_test_classes=25,
                synthetic_density=0.2)
    base.update(overrides)
    return TrainConfig(**base)


BENCHMARK_LR = 3e-3


def build_libraries(config: TrainConfig) -> tuple[ClassLibrary, ClassLibrary]:
    """Train/test libraries for the configured dataset."""
    from .episodes import data_root, load_omniglot, split_classes

    if config.dataset == "synthetic":
        kw = dict(noise=config.synthetic_noise, density=config.synthetic_density)
        train = synthetic_library(config.synthetic_classes, config.synthetic_samples,
                                  seed=config.data_seed, **kw)
        test = synthetic_library(config.synthetic_test_classes, config.synthetic_samples,
                                 seed=config.data_seed + 1, id_offset=config.synthetic_classes, **kw)
        return train, test
    if config.dataset == "omniglot":
        root = config.data_root or data_root()
        if not root:
            raise FileNotFoundError("omniglot needs data_root or FLMN_DATA_ROOT")
        lib = load_omniglot(Path(root), keep_native=config.augment)
        return split_classes(lib, config.train_classes, config.data_seed)
    raise ValueError(f"unknown dataset {config.dataset!r}")


# --------------------------------------------------------------------------
# forward pass over a batch

_GRAPHS: dict = {}


def episode_graph(config: ControllerConfig, steps: int, batch: int):
    key = (config, steps, batch)
    if key not in _GRAPHS:
        _GRAPHS[key] = assemble_episode_graph(config.kind, steps, config, batch)
    return _GRAPHS[key]


def run_episode_batch(params: ParamSet, batch: EpisodeBatch, config: ControllerConfig,
                      with_grads: bool = False):
    """Loss (summed over steps, averaged over episodes) and argmax predictions.

    With ``with_grads`` also returns parameter gradients.
    """
    if batch.offset_labels.shape[-1] != config.n_classes:
        raise ValueError(f"batch has {batch.offset_labels.shape[-1]} classes, "
                         f"model expects {config.n_classes}")
    if batch.images.shape[-1] != config.image_width:
        raise ValueError("image width does not match the model")
    eg = episode_graph(config, batch.steps, batch.batch_size)
    feed = eg.feed(params, batch.images, batch.offset_labels, batch.targets)
    wrt = eg.param_names if with_grads else []
    outs, grads = dm.forward_backward(eg.graph, eg.loss, feed, wrt, [eg.loss] + eg.logits)
    loss = float(outs[0])
    preds = np.stack([np.argmax(lg, axis=-1) for lg in outs[1:]], axis=1)
    if with_grads:
        return loss, preds, grads
    return loss, preds


# --------------------------------------------------------------------------
# instance accuracy


@dataclass
class InstanceAccuracyTable:
    correct: np.ndarray
    counts: np.ndarray
    episodes: int = 0

    @classmethod
    def empty(cls, S: int) -> "InstanceAccuracyTable":
        return cls(np.zeros(S, dtype=np.int64), np.zeros(S, dtype=np.int64), 0)

    def add(self, preds: np.ndarray, batch: EpisodeBatch) -> None:
        hit = (preds == batch.targets)
        idx = batch.instance - 1
        np.add.at(self.correct, idx, hit.astype(np.int64))
        np.add.at(self.counts, idx, 1)
        self.episodes += batch.batch_size

    @property
    def accuracy(self) -> np.ndarray:
        return np.where(self.counts > 0, self.correct / np.maximum(self.counts, 1), 0.0)

    def __getitem__(self, k: int) -> float:
        """Accuracy on the k-th presentation (1-based)."""
        return float(self.accuracy[k - 1])

    def format(self, columns=None) -> str:
        S = len(self.counts)
        columns = columns or list(range(1, S + 1))
        names = [_ordinal(k) for k in columns]
        head = " ".join(f"{n:>6}" for n in names)
        vals = " ".join(f"{100 * self[k]:6.1f}" for k in columns)
        return f"INSTANCE (% CORRECT), {self.episodes} episodes\n{head}\n{vals}"


def _ordinal(k: int) -> str:
    suffix = "th" if 10 <= k % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(k % 10, "th")
    return f"{k}{suffix}"


def evaluate_predictor(predict: Callable[[EpisodeBatch], np.ndarray], library: ClassLibrary,
                       n_episodes: int, C: int, S: int, seed: int, batch_size: int = 16,
                       augment: AugmentationSpec | None = None) -> InstanceAccuracyTable:
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    if len(library) < C:
        raise ValueError(f"library has {len(library)} classes, need {C}")
    table = InstanceAccuracyTable.empty(S)
    done = 0
    while done < n_episodes:
        b = min(batch_size, n_episodes - done)
        batch = make_episode_batch(library, C, S, b, augment, seed, first_index=done)
        table.add(np.asarray(predict(batch)), batch)
        done += b
    return table


def evaluate(checkpoint: "Checkpoint", library: ClassLibrary, n_episodes: int,
             C: int | None = None, S: int | None = None, seed: int = 12345,
             batch_size: int = 16) -> InstanceAccuracyTable:
    """Per-instance accuracy of a checkpointed model; no parameter updates."""
    cfg = checkpoint.config
    C = C or cfg.classes_per_episode
    S = S or cfg.samples_per_class
    if C != cfg.classes_per_episode:
        raise ValueError(f"checkpoint model is {cfg.classes_per_episode}-way, asked for {C}")
    mcfg = cfg.model_config()
    params = checkpoint.params

    def predict(batch):
        return run_episode_batch(params, batch, mcfg)[1]

    return evaluate_predictor(predict, library, n_episodes, C, S, seed, batch_size,
                              cfg.augmentation())


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()}, 0)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_update(params: ParamSet, grads: dict, state: AdamState, config: TrainConfig):
    """Clip by global norm, then one bias-corrected Adam step. Returns new
    ``(params, state)``; inputs are not modified."""
    norm = global_norm(grads)
    factor = config.clip_norm / norm if config.clip_norm and norm > config.clip_norm else 1.0
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_p, new_m, new_v = {}, {}, {}
    for n, p in params.items():
        g = grads[n] * factor
        m = b1 * state.m[n] + (1 - b1) * g
        v = b2 * state.v[n] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[n] = p - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_eps)
        new_m[n], new_v[n] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamSet
    optimizer: AdamState
    episode: int = 0
    rng: dict = field(default_factory=dict)
    version: int = CKPT_VERSION


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = []
    for prefix, d in (("param", ckpt.params), ("adam_m", ckpt.optimizer.m), ("adam_v", ckpt.optimizer.v)):
        for name, arr in d.items():
            tensors.append((f"{prefix}/{name}", np.asarray(arr, dtype="<f8")))
    manifest, offset = [], 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({
        "config": dataclasses.asdict(ckpt.config),
        "episode": ckpt.episode,
        "rng": ckpt.rng,
        "adam_step": ckpt.optimizer.step,
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(header)) + header + b"".join(a.tobytes() for _, a in tensors)
    return (CKPT_MAGIC + struct.pack("<IQ", ckpt.version, len(body)) + body
            + hashlib.sha256(body).digest())


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointVersionError("not an FLMN checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError("checkpoint truncated")
    version, body_len = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    body = data[20:20 + body_len]
    digest = data[20 + body_len:20 + body_len + 32]
    if len(body) != body_len or hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack_from("<I", body, 0)
    header = json.loads(body[4:4 + hlen].decode("utf-8"))
    blob = body[4 + hlen:]
    groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for t in header["tensors"]:
        prefix, name = t["name"].split("/", 1)
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=t["offset"])
        groups[prefix][name] = arr.reshape(t["shape"]).astype(np.float64)
    return Checkpoint(TrainConfig(**header["config"]), groups["param"],
                      AdamState(groups["adam_m"], groups["adam_v"], header["adam_step"]),
                      header["episode"], header["rng"], version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# training


class TrainingHalted(RuntimeError):
    pass


@dataclass
class TrainResult:
    log: list[dict]
    checkpoint: Checkpoint
    batch_losses: list[float]
    stream_digest: str


def csv_header(S: int) -> list[str]:
    return ["episode", "loss"] + [f"inst{k}" for k in range(1, S + 1)]


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "episode" else float(v)) for k, v in r.items()} for r in rows]


def train(config: TrainConfig, library: ClassLibrary, out_dir=None,
          resume: Checkpoint | None = None, stop_after: int | None = None) -> TrainResult:
    """Episodic training with Adam.

    Batch ``k`` holds stream episodes ``k*B .. k*B+B-1`` of ``config.seed``.
    Every ``eval_every`` episodes a row of windowed training loss and
    per-instance accuracy is logged (and appended to ``metrics.csv`` in
    ``out_dir``). ``stop_after`` ends the run early after that many episodes,
    which is how interrupted runs are simulated.
    """
    mcfg = config.model_config()
    C, S, B = config.classes_per_episode, config.samples_per_class, config.batch_size
    augment = config.augmentation()
    if resume is None:
        params = init_params(mcfg, config.seed)
        opt = AdamState.zeros(params)
        episode = 0
    else:
        params, opt, episode = dict(resume.params), resume.optimizer, resume.episode

    out = Path(out_dir) if out_dir else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "a" if resume else "w", newline="")
        writer = csv.writer(fh)
        if resume is None:
            writer.writerow(csv_header(S))
            fh.flush()

    rows: list[dict] = []
    losses: list[float] = []
    stream = hashlib.sha256()
    window = InstanceAccuracyTable.empty(S)
    window_loss: list[float] = []
    end = config.episodes if stop_after is None else min(config.episodes, stop_after)

    def snapshot():
        return Checkpoint(dataclasses.replace(config), dict(params), opt, episode,
                          {"seed": config.seed, "next_episode": episode})

    try:
        while episode < end:
            b = min(B, config.episodes - episode)
            batch = make_episode_batch(library, C, S, b, augment, config.seed, first_index=episode)
            stream.update(batch.digest().encode())
            try:
                loss, preds, grads = run_episode_batch(params, batch, mcfg, with_grads=True)
            except dm.NonFiniteError as e:
                norms = ", ".join(f"{n}={np.linalg.norm(p):.3g}" for n, p in params.items())
                raise TrainingHalted(f"non-finite value at episode {episode} ({e}); "
                                     f"parameter norms: {norms}") from e
            if not np.isfinite(loss):
                raise TrainingHalted(f"non-finite loss at episode {episode}")
            params, opt = adam_update(params, grads, opt, config)
            prev = episode
            episode += b
            losses.append(loss)
            window_loss.append(loss)
            window.add(preds, batch)
            if episode // config.eval_every > prev // config.eval_every or episode == config.episodes:
                row = {"episode": episode, "loss": float(np.mean(window_loss))}
                row.update({f"inst{k}": window[k] for k in range(1, S + 1)})
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[h] if h == "episode" else repr(row[h]) for h in csv_header(S)])
                    fh.flush()
                log.info("episode %d loss %.4f inst1 %.3f inst2 %.3f", episode, row["loss"],
                         row["inst1"], row.get("inst2", float("nan")))
                window = InstanceAccuracyTable.empty(S)
                window_loss = []
            if (out is not None and config.checkpoint_every
                    and episode // config.checkpoint_every > prev // config.checkpoint_every):
                save_checkpoint(out / f"checkpoint_{episode:07d}.ckpt", snapshot())
    finally:
        if writer is not None:
            fh.close()

    ckpt = snapshot()
    if out is not None:
        save_checkpoint(out / "final.ckpt", ckpt)
    return TrainResult(rows, ckpt, losses, stream.hexdigest())
