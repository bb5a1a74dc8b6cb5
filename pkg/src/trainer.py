import os
import time
from dataclasses import dataclass

import numpy as np

import encoders
import model as vqa_model
import spcl


@dataclass
class TrainConfig:
    strategy: str = "spcl"
    epochs: int = 60
    batch_size: int = 64
    cl_epochs: int = spcl.DEFAULT_CL_EPOCHS
    tau0: float = spcl.DEFAULT_TAU0
    seed: int = 0
    workers: int = 1

    def validate(self):
        if self.strategy not in spcl.STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy}")
        if self.epochs < 1 or self.batch_size < 1 or self.cl_epochs < 0:
            raise ValueError("epochs and batch size must be >= 1, cl_epochs >= 0")
        if not 0.0 < self.tau0 <= 1.0:
            raise ValueError(f"tau0 must be in (0, 1], got {self.tau0}")
        return self


class SampleSet:
    """
    Pre-encoded training samples: one float image per scene, padded token
    matrix, labels. Batches are cut from these by index.
    """

    def __init__(self, triplets, dataset, params):
        config = params.config
        self.triplets = list(triplets)
        self.qtypes = [t.qtype for t in self.triplets]

        scene_ids = sorted({t.scene_id for t in self.triplets})
        scene_pos = {s: i for i, s in enumerate(scene_ids)}
        self.images = encoders.prepare_images(
            np.stack([dataset.images[s] for s in scene_ids]), config.image_blocks)
        self.scene_index = np.array([scene_pos[t.scene_id] for t in self.triplets], dtype=np.int64)

        token_lists = [encoders.tokenize(t.question) for t in self.triplets]
        self.token_counts = np.array([len(t) for t in token_lists], dtype=np.int64)
        self.tokens, self.lengths = encoders.encode_tokens(token_lists, params.vocab, config.max_tokens)
        self.labels = np.array([params.answer_index(t.answer) for t in self.triplets], dtype=np.int64)

    def __len__(self):
        return len(self.triplets)

    def batch(self, idx):
        idx = np.asarray(idx)
        lengths = self.lengths[idx]
        return vqa_model.Batch(
            ids=[self.triplets[i].id for i in idx],
            qtypes=[self.qtypes[i] for i in idx],
            images=self.images[self.scene_index[idx]],
            tokens=self.tokens[idx, :int(lengths.max())],
            lengths=lengths,
            labels=self.labels[idx],
        )


class TraceWriter:
    """
    Per-epoch CSV: epoch, phase, K, lambda, mean_loss, then per type the
    inclusion proportion, mean weight and validation accuracy, then AA/OA
    """

    def __init__(self, path, types):
        self.path = path
        self.types = list(types)

        header = ["epoch", "phase", "K", "lambda", "mean_loss"]
        header += [f"prop_{t}" for t in self.types]
        header += [f"meanv_{t}" for t in self.types]
        header += [f"valacc_{t}" for t in self.types]
        header += ["val_AA", "val_OA"]

        with open(self.path, "w", encoding="utf-8") as f:
            f.write(",".join(header) + "\n")

    def append(self, epoch, result, k, lam, qtypes, report):
        qtypes = np.asarray(qtypes)
        props, means, accs = [], [], []
        for t in self.types:
            mask = qtypes == t
            w = result.weights[mask]
            props.append(_fmt(np.mean(w > 0)) if mask.any() else "")
            means.append(_fmt(np.mean(w)) if mask.any() else "")
            acc = report.per_type.get(t)
            accs.append(_fmt(acc) if acc is not None else "")

        row = [str(epoch), result.phase, _fmt(k), _fmt(lam) if lam is not None else "", _fmt(result.losses.mean())]
        row += props + means + accs
        row += [_fmt(report.average_accuracy), _fmt(report.overall_accuracy)]

        with open(self.path, "a", encoding="utf-8") as f:
            f.write(",".join(row) + "\n")


def _fmt(x):
    return f"{float(x):.6f}"


@dataclass
class TrainResult:
    best_epoch: int
    best_val_oa: float
    final_report: object
    best_params: object


def train(params, optimizer, dataset, train_triplets, val_triplets, types, config, run_dir, priors=None):
    """
    Epoch loop over the selected strategy. Writes trace.csv and best.bin
    into run_dir; returns the best-validation parameters (ties keep the
    earlier epoch).
    """
    config.validate()
    train_set = SampleSet(train_triplets, dataset, params)

    curriculum = None
    if config.strategy == "spcl":
        curriculum = spcl.ranking_scores(train_set.qtypes, train_set.token_counts, priors or {})

    trace = TraceWriter(os.path.join(run_dir, "trace.csv"), types)
    state = spcl.PaceState()
    best_path = os.path.join(run_dir, "best.bin")
    best_epoch, best_oa = -1, -1.0
    report = None

    for epoch in range(config.epochs):
        st = time.time()
        phase = spcl.phase_for(config.strategy, epoch, config.cl_epochs, state.prev_losses is not None)
        if phase == spcl.PHASE_UNIFORM and config.strategy != "shuffle":
            print(f"[WARN] epoch {epoch}: no previous losses yet, warm-up epoch with uniform weights")

        params, state, result = spcl.spcl_epoch(
            params, optimizer, len(train_set), train_set.batch, state, phase,
            batch_size=config.batch_size,
            seed=config.seed,
            curriculum=curriculum,
            cl_epochs=config.cl_epochs,
            tau0=config.tau0,
        )

        report = vqa_model.evaluate(params, val_triplets, dataset, types, config.batch_size, config.workers)
        trace.append(epoch, result, state.K, state.lam, train_set.qtypes, report)

        if report.overall_accuracy > best_oa:
            best_epoch, best_oa = epoch, report.overall_accuracy
            vqa_model.save(params, best_path)

        lam = f"{state.lam:.4f}" if state.lam is not None else "-"
        print(f"[Trainer] epoch {epoch} {phase} K={state.K:.4f} lambda={lam} "
              f"loss={result.losses.mean():.4f} included={np.mean(result.weights > 0):.3f} "
              f"fallback_batches={result.fallback_batches} "
              f"val_OA={report.overall_accuracy:.4f} val_AA={report.average_accuracy:.4f} "
              f"({time.time() - st:.1f}s)")

    best_params = vqa_model.load(best_path)
    return TrainResult(best_epoch=best_epoch, best_val_oa=best_oa, final_report=report, best_params=best_params)
