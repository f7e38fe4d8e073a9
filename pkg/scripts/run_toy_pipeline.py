#!/usr/bin/env python3
"""End-to-end toy pipeline on a 5x5 board: generate problems, GA-label an
expert dataset, train the policy, evaluate zero-shot, and render a report.

Everything goes through the CLI so the run is reproducible from the shell:
    python3 scripts/run_toy_pipeline.py --out runs/toy --seed 0
"""

import argparse
import pathlib
import sys

from decapbench.cli import main as cli


def sh(*argv):
    argv = [str(a) for a in argv]
    print("+ decapbench " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=800)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    sh("gen", "--rows", 5, "--cols", 5, "--train", 50, "--val", 20,
       "--test", 20, "--keepout-max", 4, "--expert", "--k", 4,
       "--seed", args.seed, "--out", out)
    sh("train", "--dataset", out / "expert_dataset.jsonl",
       "--val-problems", out / "val_problems.json", "--preset", "toy",
       "--steps", args.steps, "--seed", args.seed,
       "--out", out / "model.ckpt", "--log", out / "train.csv")
    sh("eval", "--checkpoint", out / "model.ckpt",
       "--problems", out / "test_problems.json", "--k", 4,
       "--out", out / "eval.json")
    sh("baselines", "--problems", out / "test_problems.json", "--k", 4,
       "--rs-budgets", 100, "--ga-presets", "20:5:4",
       "--seed", args.seed, "--out", out / "baselines.json")
    sh("report", "--report", out / "eval.json", "--verify",
       "--out", out / "plots")
    print(f"done: artifacts under {out}")


if __name__ == "__main__":
    main()
