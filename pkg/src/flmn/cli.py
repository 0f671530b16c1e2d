"""Command-line entry point: ``flmn train|eval|compare|selftest``.

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 dataset error,
4 training halted on a non-finite value, 5 unusable checkpoint.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .episodes import DatasetError, data_root, load_mnist_idx, load_omniglot, make_minimnist, split_classes
from .harness import CheckpointError, CheckpointVersionError, TrainConfig, TrainingHalted

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DATASET, EXIT_NAN, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5

ALIASES = {"lr": "learning_rate", "batch": "batch_size", "C": "classes_per_episode",
           "S": "samples_per_class", "rows": "memory_rows", "width": "memory_width",
           "hidden": "hidden_width"}
EXTRA_KEYS = ("out",)

log = logging.getLogger("flmn")


class ConfigError(Exception):
    pass


def _fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, raw: str, where: str):
    if name in EXTRA_KEYS:
        return raw
    ftype = _fields()[name].type
    try:
        if ftype in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: bad value {raw!r} for {name} ({ftype})") from None


def _key(raw: str, where: str) -> str:
    name = ALIASES.get(raw, raw)
    if name not in _fields() and name not in EXTRA_KEYS:
        raise ConfigError(f"{where}: unknown key {raw!r}")
    return name


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        name = _key(k, where)
        if name in values:
            raise ConfigError(f"{where}: duplicate key {k!r}")
        values[name] = _coerce(name, v, where)
    return values


def parse_overrides(items: list[str]) -> dict:
    values = {}
    for item in items or []:
        where = f"--set {item}"
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        name = _key(k, where)
        values[name] = _coerce(name, v, where)
    return values


def resolve_config(args) -> tuple[TrainConfig, str | None, list[str]]:
    """File values, then ``--set`` overrides, then dedicated flags.

    Returns the config, the output directory and header lines describing
    where each non-default value came from.
    """
    file_vals = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        file_vals = parse_config_text(text, args.config)
    over = parse_overrides(getattr(args, "set", None))
    for flag in ("seed", "model", "episodes"):
        v = getattr(args, flag, None)
        if v is not None:
            over[flag] = v
    merged = {**file_vals, **over}
    out = merged.pop("out", None)
    if getattr(args, "out", None):
        out = args.out
    try:
        cfg = TrainConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    header = []
    for name, f in _fields().items():
        value = getattr(cfg, name)
        if name in over:
            src = "override"
        elif name in file_vals:
            src = "file"
        else:
            src = "default"
        header.append(f"# {name} = {value}  ({src})")
    return cfg, out, header


@contextlib.contextmanager
def _thread_limit(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _write_config_echo(out: Path, header: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(header) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg, out, header = resolve_config(args)
    print("\n".join(header))
    out = Path(out or "runs/train")
    libs = harness.build_libraries(cfg)
    _write_config_echo(out, header)
    result = harness.train(cfg, libs[0], out)
    table = harness.evaluate(result.checkpoint, libs[1], cfg.eval_episodes, seed=cfg.seed + 1)
    print(table.format())
    _write_table_csv(out / "test_accuracy.csv", table, cfg.dataset)
    print(f"wrote {out / 'metrics.csv'} and {out / 'final.ckpt'}")
    return EXIT_OK


def _write_table_csv(path: Path, table, dataset: str) -> None:
    S = len(table.counts)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dataset", "episodes"] + [f"inst{k}" for k in range(1, S + 1)])
        w.writerow([dataset, table.episodes] + [repr(table[k]) for k in range(1, S + 1)])


def _eval_library(dataset: str, cfg: TrainConfig, args):
    if dataset == "synthetic":
        return harness.build_libraries(cfg)[1]
    if dataset == "omniglot-test":
        root = args.data_root or cfg.data_root or data_root()
        if not root:
            raise DatasetError("omniglot-test needs --data-root or FLMN_DATA_ROOT")
        lib = load_omniglot(Path(root), keep_native=cfg.augment)
        return split_classes(lib, cfg.train_classes, cfg.data_seed)[1]
    if dataset == "minimnist":
        images, labels = args.mnist_images or cfg.mnist_images, args.mnist_labels or cfg.mnist_labels
        if not (images and labels):
            root = data_root()
            if root is None:
                raise DatasetError("minimnist needs --mnist-images/--mnist-labels or FLMN_DATA_ROOT")
            images = images or _first_existing(root, "t10k-images-idx3-ubyte")
            labels = labels or _first_existing(root, "t10k-labels-idx1-ubyte")
        return make_minimnist(load_mnist_idx(images, labels), 20, cfg.data_seed)
    raise ConfigError(f"unknown dataset {dataset!r}")


def _first_existing(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / (stem + ".gz"), root / "mnist" / stem, root / "mnist" / (stem + ".gz")):
        if cand.exists():
            return cand
    raise DatasetError(f"no {stem} under {root}")


def cmd_eval(args) -> int:
    if args.episodes is not None and args.episodes <= 0:
        raise ConfigError(f"--episodes must be positive, got {args.episodes}")
    ckpt = harness.load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    lib = _eval_library(args.dataset, cfg, args)
    n = args.episodes or cfg.eval_episodes
    seed = cfg.seed + 1 if args.seed is None else args.seed
    table = harness.evaluate(ckpt, lib, n, seed=seed)
    print(table.format())
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{args.dataset}.csv"
    _write_table_csv(path, table, args.dataset)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, out, header = resolve_config(args)
    kinds = [k.strip() for k in args.models.split(",")]
    if len(kinds) != 2:
        raise ConfigError(f"--models needs two kinds, got {args.models!r}")
    for k in kinds:
        if k not in ("flmn", "mann"):
            raise ConfigError(f"unknown model kind {k!r}")
    if kinds[0] == kinds[1]:
        log.warning("both sides of the comparison are %s; the differences will be zero", kinds[0])
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    print("\n".join(header))
    out = Path(out or "runs/compare")
    train_lib, _ = harness.build_libraries(cfg)
    _write_config_echo(out, header)
    S = cfg.samples_per_class
    rows = []
    for seed in seeds:
        results = {}
        for i, kind in enumerate(kinds):
            run_cfg = dataclasses.replace(cfg, model=kind, seed=seed)
            tag = f"{kind}_seed{seed}" + (f"_{i}" if kinds[0] == kinds[1] else "")
            results[i] = harness.train(run_cfg, train_lib, out / tag)
        if results[0].stream_digest != results[1].stream_digest:
            raise RuntimeError(f"episode streams differ for seed {seed}")
        last = [results[i].log[-1] for i in (0, 1)]
        for k in range(1, S + 1):
            a, b = last[0][f"inst{k}"], last[1][f"inst{k}"]
            rows.append([seed, k, repr(a), repr(b), repr(a - b)])
        print(f"seed {seed}: streams match ({results[0].stream_digest[:12]}); "
              f"inst2 {kinds[0]} {last[0]['inst2'] if S > 1 else last[0]['inst1']:.3f} "
              f"{kinds[1]} {last[1]['inst2'] if S > 1 else last[1]['inst1']:.3f}")
    path = out / "comparison.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "instance", kinds[0], kinds[1] if kinds[1] != kinds[0] else kinds[1] + "_2", "diff"])
        w.writerows(rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_report, run_selftest

    results = run_selftest(mutate=args.mutate)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flmn", description="Feature-label memory network experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=True):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS for bit-exact reruns")
        if training:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
            sp.add_argument("--model", choices=["flmn", "mann"])
            sp.add_argument("--episodes", type=int)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-instance accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", choices=["omniglot-test", "minimnist", "synthetic"], default="synthetic")
    e.add_argument("--episodes", type=int)
    e.add_argument("--data-root")
    e.add_argument("--mnist-images")
    e.add_argument("--mnist-labels")
    common(e, training=False)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train two models on identical episode streams")
    common(c)
    c.add_argument("--models", default="flmn,mann", help="two comma-separated kinds")
    c.add_argument("--seeds", help="comma-separated seeds for paired runs")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", help="equation oracles, gradient checks, invariants")
    s.add_argument("--mutate", help=argparse.SUPPRESS)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit(getattr(args, "deterministic", False)):
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return EXIT_DATASET
    except TrainingHalted as e:
        print(f"training halted: {e}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointVersionError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
