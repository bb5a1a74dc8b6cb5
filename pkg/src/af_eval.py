import argparse
import os

from dotenv import load_dotenv

import encoders
import model as vqa_model
import synthdata
import utils


def add_arguments(parser):
    parser.add_argument("--model", help="model file (model.bin / best.bin)", default=None)
    parser.add_argument("--data", help="dataset directory (default: $SPCL_DATA_DIR or ./data/synth)", default=None)
    parser.add_argument("--split", choices=synthdata.SPLITS, default="test")
    parser.add_argument("--out", help="metrics CSV (default: metrics_<split>.csv next to the model)", default=None)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--workers", help="evaluation threads", type=int, default=1)
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


def check_vocabulary(params, triplets):
    """
    Every answer must be a known class; unknown question tokens are only
    reported (they map to the unknown index).
    """
    unknown_answers = sorted({t.answer for t in triplets} - set(params.answers))
    if unknown_answers:
        raise vqa_model.VocabularyMismatchError(
            f"dataset answers not in the model's answer vocabulary: {unknown_answers}")

    unknown_tokens = set()
    for t in triplets:
        unknown_tokens.update(tok for tok in encoders.tokenize(t.question) if tok not in params.vocab)
    if unknown_tokens:
        print(f"[WARN] {len(unknown_tokens)} question token(s) unknown to the model: {sorted(unknown_tokens)[:10]}")


def run(args):
    if not args.model:
        raise utils.UsageError("--model is required")
    args.data = utils.env_default(args.data, "SPCL_DATA_DIR", "./data/synth")
    if args.out is None:
        args.out = os.path.join(os.path.dirname(os.path.abspath(args.model)), f"metrics_{args.split}.csv")

    print("######################################################")
    print(f"# Evaluate {args.model} on {args.split}")
    print("######################################################")
    params = vqa_model.load(args.model)
    dataset = synthdata.read_dataset(args.data)

    triplets = dataset.split(args.split)
    if not triplets:
        raise synthdata.DatasetError(f"split {args.split} is empty")

    check_vocabulary(params, triplets)
    types = [q for q in synthdata.QUESTION_TYPES if any(t.qtype == q for t in dataset.triplets)]

    report = vqa_model.evaluate(params, triplets, dataset, types, args.batch_size, args.workers)
    report.save(args.out)
    report.print()

    print(f"[INFO] metrics written to {args.out}")
    return 0


parser = argparse.ArgumentParser(description="Evaluate a trained model on a dataset split")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    run(args)
