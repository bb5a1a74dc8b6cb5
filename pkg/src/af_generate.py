import argparse

from dotenv import load_dotenv

import synthdata
import utils


def add_arguments(parser):
    parser.add_argument("--out", help="dataset directory (default: $SPCL_DATA_DIR or ./data/synth)",
                        default=None)
    parser.add_argument("--scenes", help="number of scenes", type=int, default=600)
    parser.add_argument("--seed", help="generator seed (default: $SPCL_SEED or 0)", type=int, default=None)
    parser.add_argument("--grid-size", help="cells per side", type=int, default=8)
    parser.add_argument("--image-size", help="image side in pixels", type=int, default=64)
    parser.add_argument("--urban-threshold", help="building-cell fraction for the urban label",
                        type=float, default=0.15)
    parser.add_argument("--active-prob", help="probability a category appears in a scene",
                        type=float, default=0.5)
    parser.add_argument("--category-probs", help="cell probabilities, comma separated in the order "
                        + ",".join(synthdata.CATEGORIES),
                        default=",".join(str(p) for p in synthdata.DEFAULT_CATEGORY_PROBS))
    parser.add_argument("--questions", help="questions per scene and type, e.g. presence=2,count=1",
                        default=",".join(f"{k}={v}" for k, v in synthdata.DEFAULT_QUESTIONS.items()))
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


def resolve(args):
    args.out = utils.env_default(args.out, "SPCL_DATA_DIR", "./data/synth")
    args.seed = int(utils.env_default(args.seed, "SPCL_SEED", 0))
    return args


def run(args):
    resolve(args)

    print("######################################################")
    print("# Generate synthetic dataset")
    print("######################################################")
    print(f"out: {args.out}, scenes: {args.scenes}, seed: {args.seed}")

    config = synthdata.SceneConfig(
        grid_size=args.grid_size,
        urban_threshold=args.urban_threshold,
        category_probs=tuple(utils.parse_csv_list(args.category_probs, float)),
        active_prob=args.active_prob,
    )
    counts = utils.parse_kv_list(args.questions, int)

    dataset = synthdata.generate_dataset(args.scenes, args.seed, config, args.image_size, counts)

    with utils.atomic_dir(args.out) as tmp:
        synthdata.write_dataset(dataset, tmp)
        with open(f"{tmp}/config.env", "w", encoding="utf-8") as f:
            f.write(utils.config_echo(args))

    print("######################################################")
    print("# Summary")
    print("######################################################")
    per_type, answers, split_sizes = synthdata.summarize(dataset)
    print(f"triplets: {len(dataset.triplets)}, scenes: {len(dataset.scenes)}, splits: {split_sizes}")
    for qtype in synthdata.QUESTION_TYPES:
        hist = ", ".join(f"{a}: {n}" for a, n in sorted(answers[qtype].items()))
        print(f" - {qtype}: {per_type[qtype]} ({hist})")

    return 0


parser = argparse.ArgumentParser(description="Generate the synthetic scene/question dataset")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    run(args)
