import argparse
import os

from dotenv import load_dotenv

import encoders
import model as vqa_model
import optim
import spcl
import synthdata
import trainer
import utils


def add_arguments(parser):
    parser.add_argument("--data", help="dataset directory (default: $SPCL_DATA_DIR or ./data/synth)", default=None)
    parser.add_argument("--out", help="run directory (default: $SPCL_RUN_DIR/<strategy>-<variant>-s<seed>)",
                        default=None)
    parser.add_argument("--strategy", help="training strategy", choices=spcl.STRATEGIES, default="spcl")
    parser.add_argument("--variant", help="model variant", choices=sorted(vqa_model.VARIANTS), default="mll")
    parser.add_argument("--fusion", help="vision/language fusion", choices=vqa_model.FUSIONS, default="product")
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", help="learning rate", type=float, default=1e-3)
    parser.add_argument("--optimizer", choices=optim.OPTIMIZERS, default="adaptive")
    parser.add_argument("--cl-epochs", help="curriculum epochs before self-paced learning",
                        type=int, default=spcl.DEFAULT_CL_EPOCHS)
    parser.add_argument("--tau0", help="initial curriculum budget fraction", type=float, default=spcl.DEFAULT_TAU0)
    parser.add_argument("--priors", help="prior weights: preset (" + ",".join(spcl.PRIOR_PRESETS)
                        + ") or type=weight list", default="synthetic")
    parser.add_argument("--train-fraction", help="fraction of training scenes to use", type=float, default=1.0)
    parser.add_argument("--image-size", type=int, default=None, help="override; default from the dataset")
    parser.add_argument("--workers", help="threads for validation/test evaluation", type=int, default=1)
    parser.add_argument("--seed", help="run seed (default: $SPCL_SEED or 0)", type=int, default=None)
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


def resolve(args):
    args.data = utils.env_default(args.data, "SPCL_DATA_DIR", "./data/synth")
    args.seed = int(utils.env_default(args.seed, "SPCL_SEED", 0))
    if args.out is None:
        root = os.getenv("SPCL_RUN_DIR", "./runs")
        args.out = os.path.join(root, f"{args.strategy}-{args.variant}-s{args.seed}")

    if not 0.0 < args.train_fraction <= 1.0:
        raise utils.UsageError(f"--train-fraction must be in (0, 1], got {args.train_fraction}")
    if not 0.0 < args.tau0 <= 1.0:
        raise utils.UsageError(f"--tau0 must be in (0, 1], got {args.tau0}")
    if args.epochs < 1 or args.batch_size < 1 or args.cl_epochs < 0 or args.lr <= 0:
        raise utils.UsageError("--epochs, --batch-size and --lr must be positive, --cl-epochs >= 0")

    return args


def types_in(triplets):
    present = {t.qtype for t in triplets}
    return [q for q in synthdata.QUESTION_TYPES if q in present]


def run(args):
    resolve(args)
    priors = spcl.parse_priors(args.priors)

    print("######################################################")
    print("# Load dataset")
    print("######################################################")
    dataset = synthdata.read_dataset(args.data)

    train_items = synthdata.subset_by_scene(dataset.split("train"), args.train_fraction, args.seed)
    val_items = dataset.split("val")
    test_items = dataset.split("test")
    if not train_items or not val_items:
        raise synthdata.DatasetError("dataset needs non-empty train and val splits")

    types = types_in(dataset.triplets)
    if args.strategy == "spcl":
        missing = [t for t in types_in(train_items) if t not in priors]
        if missing:
            raise spcl.PaceError(f"no prior weight for question type(s): {', '.join(missing)}")

    image_size = args.image_size or next(iter(dataset.images.values())).shape[0]
    print(f"train: {len(train_items)}, val: {len(val_items)}, test: {len(test_items)}, types: {types}")

    vocab = encoders.build_vocabulary(t.question for t in dataset.split("train"))
    config = vqa_model.ModelConfig.from_variant(args.variant, fusion=args.fusion, image_size=image_size)
    params = vqa_model.ModelParams.init(config, vocab, synthdata.ANSWER_CLASSES, seed=args.seed)
    optimizer = optim.make_optimizer(args.optimizer, params.tensors, args.lr)

    print(f"[INFO] vocabulary: {len(vocab)} tokens, parameters: {params.num_parameters()}")

    train_config = trainer.TrainConfig(
        strategy=args.strategy,
        epochs=args.epochs,
        batch_size=args.batch_size,
        cl_epochs=args.cl_epochs,
        tau0=args.tau0,
        seed=args.seed,
        workers=args.workers,
    )

    with utils.atomic_dir(args.out) as tmp:
        with open(os.path.join(tmp, "config.env"), "w", encoding="utf-8") as f:
            f.write(utils.config_echo(args))

        print("######################################################")
        print(f"# Train ({args.strategy}, {args.variant})")
        print("######################################################")
        result = trainer.train(params, optimizer, dataset, train_items, val_items, types,
                               train_config, tmp, priors=priors)
        vqa_model.save(params, os.path.join(tmp, "model.bin"))

        print("######################################################")
        print(f"# Evaluate best model (epoch {result.best_epoch})")
        print("######################################################")
        eval_items = test_items or val_items
        report = vqa_model.evaluate(result.best_params, eval_items, dataset, types,
                                    args.batch_size, args.workers)
        report.save(os.path.join(tmp, "metrics.csv"))
        report.print()

    print(f"[INFO] run written to {args.out}")
    return 0


parser = argparse.ArgumentParser(description="Train the VQA model")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    run(args)
