#!/usr/bin/env python3
"""
Desk-scale directional experiments on the default synthetic dataset:
curriculum dynamics, end-to-end accuracy per strategy, the CGA/CST ablation
direction, and run determinism. Long running (one full training per
strategy/variant and seed).
"""

import argparse
import csv
import filecmp
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from dotenv import load_dotenv
load_dotenv()

import numpy as np

import af_ablate
import cli
import utils


def train(data, out, strategy, variant, seed, epochs, extra=()):
    if os.path.exists(os.path.join(out, "metrics.csv")):
        print(f"[INFO] reusing {out}")
        return
    code = cli.main(["train", "--data", data, "--out", out, "--strategy", strategy, "--variant", variant,
                     "--seed", str(seed), "--epochs", str(epochs)] + list(extra))
    if code != 0:
        raise RuntimeError(f"training failed ({code}): {out}")


def read_trace(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def check_dynamics(run_dir, cl_epochs=15):
    rows = read_trace(os.path.join(run_dir, "trace.csv"))
    early = rows[:cl_epochs]
    count = np.mean([float(r["prop_count"]) for r in early])
    presence = np.mean([float(r["prop_presence"]) for r in early])
    print(f"[INFO] mean inclusion over epochs 0-{len(early) - 1}: count {count:.4f}, presence {presence:.4f}")

    final = {k: float(v) for k, v in rows[-1].items() if k.startswith("prop_") and v}
    print(f"[INFO] final inclusion: {final}")
    return count < presence and all(p >= 0.99 for p in final.values())


def check_end_to_end(out, seeds):
    shuffle = [af_ablate.read_metrics(os.path.join(out, f"shuffle-mll-s{s}", "metrics.csv")) for s in seeds]
    spcl = [af_ablate.read_metrics(os.path.join(out, f"spcl-mll-s{s}", "metrics.csv")) for s in seeds]

    presence = [m["presence"] for m in shuffle]
    shuffle_oa = np.mean([m["OA"] for m in shuffle])
    spcl_oa = np.mean([m["OA"] for m in spcl])
    print(f"[INFO] shuffle presence accuracy: {presence}")
    print(f"[INFO] mean OA: shuffle {shuffle_oa:.4f}, spcl {spcl_oa:.4f}")

    return min(presence) >= 0.90, spcl_oa >= shuffle_oa - 0.005


def check_ablation(out, seeds):
    drops = 0
    for s in seeds:
        full = af_ablate.read_metrics(os.path.join(out, f"spcl-mll-s{s}", "metrics.csv"))["OA"]
        base = af_ablate.read_metrics(os.path.join(out, f"spcl-baseline-s{s}", "metrics.csv"))["OA"]
        print(f"[INFO] seed {s}: mll OA {full:.4f}, baseline OA {base:.4f}")
        drops += int(base <= full)
    return drops >= 2


def check_determinism(data, out, epochs=3):
    dirs = [os.path.join(out, f"determinism-{i}") for i in range(2)]
    for d in dirs:
        code = cli.main(["train", "--data", data, "--out", d, "--seed", "0", "--epochs", str(epochs)])
        if code != 0:
            raise RuntimeError(f"training failed ({code}): {d}")

    return all(filecmp.cmp(os.path.join(dirs[0], name), os.path.join(dirs[1], name), shallow=False)
               for name in ("trace.csv", "model.bin", "best.bin"))


def run(args):
    seeds = utils.parse_csv_list(args.seeds, int)
    data = args.data or os.path.join(args.out, "data")

    if not os.path.exists(os.path.join(data, "index.tsv")):
        if cli.main(["generate", "--out", data, "--seed", "0"]) != 0:
            return 1

    st = time.time()
    for seed in seeds:
        train(data, os.path.join(args.out, f"shuffle-mll-s{seed}"), "shuffle", "mll", seed, args.epochs)
        train(data, os.path.join(args.out, f"spcl-mll-s{seed}"), "spcl", "mll", seed, args.epochs)
        train(data, os.path.join(args.out, f"spcl-baseline-s{seed}"), "spcl", "baseline", seed, args.epochs)

    print("######################################################")
    print("# Acceptance checks")
    print("######################################################")
    presence_ok, spcl_ok = check_end_to_end(args.out, seeds)
    results = {
        "curriculum dynamics": check_dynamics(os.path.join(args.out, f"spcl-mll-s{seeds[0]}")),
        "shuffle presence accuracy >= 0.90": presence_ok,
        "spcl OA non-degradation": spcl_ok,
        "ablation direction": check_ablation(args.out, seeds),
        "determinism": check_determinism(data, args.out),
    }

    for name, ok in results.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"[INFO] acceptance run took {(time.time() - st) / 60:.1f} min")

    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run the directional acceptance experiments")
    parser.add_argument("--out", help="experiment directory", default=os.getenv("SPCL_RUN_DIR", "./runs") + "/acceptance")
    parser.add_argument("--data", help="dataset directory (generated under --out if missing)", default=None)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", type=int, default=60)

    sys.exit(run(parser.parse_args()))
