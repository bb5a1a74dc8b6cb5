import argparse
import os

from dotenv import load_dotenv

import autodiff as ad
import cga
import cst
import model as vqa_model
import synthdata
import utils


def add_arguments(parser):
    parser.add_argument("--run", help="run directory holding best.bin", default=None)
    parser.add_argument("--model", help="model file (default: <run>/best.bin)", default=None)
    parser.add_argument("--data", help="dataset directory (default: $SPCL_DATA_DIR or ./data/synth)", default=None)
    parser.add_argument("--split", choices=synthdata.SPLITS, default="test")
    parser.add_argument("--limit", help="number of samples to export", type=int, default=8)
    parser.add_argument("--scale", help="overlay upscaling factor", type=int, default=4)
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


def run(args):
    if not args.run and not args.model:
        raise utils.UsageError("--run or --model is required")
    if args.limit < 1:
        raise utils.UsageError("--limit must be >= 1")

    args.data = utils.env_default(args.data, "SPCL_DATA_DIR", "./data/synth")
    model_path = args.model or os.path.join(args.run, "best.bin")
    out_dir = os.path.join(args.run or os.path.dirname(os.path.abspath(model_path)), "inspect")

    print("######################################################")
    print(f"# Inspect {model_path}")
    print("######################################################")
    params = vqa_model.load(model_path)
    dataset = synthdata.read_dataset(args.data)
    triplets = dataset.split(args.split)[:args.limit]
    if not triplets:
        raise synthdata.DatasetError(f"split {args.split} is empty")

    batch = vqa_model.make_batch(triplets, dataset, params)
    details = vqa_model.ForwardDetails()
    with ad.no_tape():
        logits = vqa_model.forward(batch, params, details)
    predictions = logits.data.argmax(axis=1)

    os.makedirs(out_dir, exist_ok=True)
    fs = params.config.feature_size
    cga.export_attention_csv(os.path.join(out_dir, "attention.csv"), batch.ids, details.attention, (fs, fs))
    cst.export_transforms_csv(os.path.join(out_dir, "transforms.csv"), batch.ids, details.transforms)

    rows = [t.rows() for t in details.transforms]
    with open(os.path.join(out_dir, "predictions.tsv"), "w", encoding="utf-8") as f:
        f.write("id\tquestion\tanswer\tprediction\n")
        for i, t in enumerate(triplets):
            f.write(f"{t.id}\t{t.question}\t{t.answer}\t{params.answers[predictions[i]]}\n")

            overlay = cst.draw_transform_overlay(dataset.image_for(t), [r[i] for r in rows], args.scale)
            overlay.save(os.path.join(out_dir, f"{t.id}.png"))

    print(f"[INFO] {len(triplets)} sample(s) exported to {out_dir}")
    return 0


parser = argparse.ArgumentParser(description="Export attention maps, transforms and overlays")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    run(args)
