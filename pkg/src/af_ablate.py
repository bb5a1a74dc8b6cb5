import argparse
import os

import numpy as np
from dotenv import load_dotenv

import af_train
import model as vqa_model
import spcl
import utils


def add_arguments(parser):
    parser.add_argument("--data", help="dataset directory (default: $SPCL_DATA_DIR or ./data/synth)", default=None)
    parser.add_argument("--out", help="sweep directory (default: $SPCL_RUN_DIR/ablate)", default=None)
    parser.add_argument("--variants", help="comma separated: " + ",".join(vqa_model.VARIANTS),
                        default="baseline,cga,cst,mll")
    parser.add_argument("--seeds", help="comma separated run seeds", default="0,1,2")
    parser.add_argument("--strategy", choices=spcl.STRATEGIES, default="spcl")
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--train-fraction", type=float, default=1.0)
    parser.add_argument("--priors", default="synthetic")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


def read_metrics(path):
    """
    metrics.csv -> {type|AA|OA: accuracy}
    """
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f.read().splitlines()[1:]:
            name, acc = line.split(",")[:2]
            out[name] = float(acc)
    return out


def summarize(results):
    """
    @param results {variant: [metrics dict per seed]}
    @return rows (variant, metric, mean, std, runs); std is the population std
    """
    rows = []
    for variant, runs in results.items():
        metrics = []
        for m in runs:
            metrics += [k for k in m if k not in metrics]

        for metric in metrics:
            values = np.array([m[metric] for m in runs if metric in m])
            rows.append((variant, metric, float(values.mean()), float(values.std()), len(values)))
    return rows


def run(args):
    args.data = utils.env_default(args.data, "SPCL_DATA_DIR", "./data/synth")
    args.out = args.out or os.path.join(os.getenv("SPCL_RUN_DIR", "./runs"), "ablate")

    variants = utils.parse_csv_list(args.variants)
    seeds = utils.parse_csv_list(args.seeds, int)
    unknown = [v for v in variants if v not in vqa_model.VARIANTS]
    if unknown or not variants or not seeds:
        raise utils.UsageError(f"bad --variants/--seeds (unknown variants: {unknown})")

    results = {}
    for variant in variants:
        results[variant] = []
        for seed in seeds:
            print("######################################################")
            print(f"# Ablation: {variant}, seed {seed}")
            print("######################################################")

            train_args = af_train.parser.parse_args([])
            train_args.data = args.data
            train_args.out = os.path.join(args.out, f"{variant}-s{seed}")
            train_args.variant = variant
            train_args.seed = seed
            train_args.strategy = args.strategy
            train_args.epochs = args.epochs
            train_args.batch_size = args.batch_size
            train_args.lr = args.lr
            train_args.train_fraction = args.train_fraction
            train_args.priors = args.priors
            train_args.workers = args.workers
            af_train.run(train_args)

            results[variant].append(read_metrics(os.path.join(train_args.out, "metrics.csv")))

    os.makedirs(args.out, exist_ok=True)
    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("variant,metric,mean,std,runs\n")
        for variant, metric, mean, std, n in summarize(results):
            f.write(f"{variant},{metric},{mean:.6f},{std:.6f},{n}\n")

    print("######################################################")
    print("# Ablation summary (OA mean ± std)")
    print("######################################################")
    for variant, metric, mean, std, n in summarize(results):
        if metric == "OA":
            print(f" - {variant}: {mean:.4f} ± {std:.4f} over {n} run(s)")

    print(f"[INFO] summary written to {summary_path}")
    return 0


parser = argparse.ArgumentParser(description="Train each model variant over several seeds")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    run(args)
