"""Paired FLMN / MANN runs on the synthetic benchmark.

Trains both kinds on the same episode stream for each seed, evaluates on
held-out classes and reports the episode at which training 2nd-instance
accuracy first reached a threshold.

    python scripts/benchmark.py --episodes 5000 --seeds 0,1,2,3,4
"""
import argparse
import csv
import time
from pathlib import Path

from flmn import harness


def first_reaching(log, key, threshold):
    for row in log:
        if row[key] >= threshold:
            return row["episode"]
    return None


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--models", default="flmn,mann")
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--eval-episodes", type=int, default=500)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--out", default="runs/benchmark")
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for kind in args.models.split(","):
            cfg = harness.benchmark_config(kind, seed, args.episodes, eval_every=args.eval_every)
            train_lib, test_lib = harness.build_libraries(cfg)
            t0 = time.perf_counter()
            res = harness.train(cfg, train_lib, out / f"{kind}_seed{seed}")
            secs = time.perf_counter() - t0
            table = harness.evaluate(res.checkpoint, test_lib, args.eval_episodes, seed=10000 + seed,
                                     batch_size=cfg.batch_size)
            hit = first_reaching(res.log, "inst2", args.threshold)
            rows.append([seed, kind, args.episodes, f"{table[1]:.4f}", f"{table[2]:.4f}",
                         f"{table[cfg.samples_per_class]:.4f}", hit if hit is not None else "", f"{secs:.1f}"])
            print(f"seed {seed} {kind}: held-out 1st {table[1]:.3f} 2nd {table[2]:.3f} "
                  f"10th {table[cfg.samples_per_class]:.3f}; 2nd >= {args.threshold} at "
                  f"{hit if hit is not None else 'never'}; {secs:.0f}s", flush=True)
    with open(out / "benchmark.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "model", "episodes", "inst1", "inst2", "inst10", "episode_reaching", "seconds"])
        w.writerows(rows)
    print(f"wrote {out / 'benchmark.csv'}")


if __name__ == "__main__":
    main()
