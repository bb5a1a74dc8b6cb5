import argparse
import time

import numpy as np
from dotenv import load_dotenv

import autodiff as ad
import cga
import cst
import encoders
import model as vqa_model
import utils


MODULES = ("encoders", "cga", "cst", "model")

MICRO_CONFIG = dict(
    image_size=8,
    image_blocks=((4, 2), (4, 1)),
    embed_dim=3,
    hidden_dim=5,
    classifier_hidden=6,
)
MICRO_TOKENS = ["a", "b", "c", "d"]
MICRO_ANSWERS = ["x", "y", "z"]


def add_arguments(parser):
    parser.add_argument("--module", help="module to check, or all", choices=MODULES + ("all",), default="all")
    parser.add_argument("--step", help="central difference step", type=float, default=1e-5)
    parser.add_argument("--tolerance", help="max relative error", type=float, default=1e-4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="key=value file with option defaults", default=None)


class MicroProblem:
    """
    Seeded tiny model and inputs: 2 samples, 8×8 images, 4 channels,
    L=5, 3 answers. Every tensor (including zero-initialized ones) is
    re-drawn so no gradient is trivially zero.
    """

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        config = vqa_model.ModelConfig(**MICRO_CONFIG)
        vocab = encoders.Vocabulary(MICRO_TOKENS)
        self.params = vqa_model.ModelParams.init(config, vocab, MICRO_ANSWERS, seed=seed)
        for t in self.params.tensors.values():
            t.data[...] = rng.normal(0.0, 0.5, size=t.shape)

        self.batch = vqa_model.Batch(
            ids=["m0", "m1"],
            qtypes=["presence", "count"],
            images=rng.uniform(0.0, 1.0, size=(2, 3, 8, 8)),
            tokens=np.array([[2, 3, 4], [5, 2, 0]]),
            lengths=np.array([3, 2]),
            labels=np.array([0, 2]),
        )

        c = config.channels
        fs = config.feature_size
        self.f_x = ad.Tensor(rng.normal(0.0, 1.0, size=(2, c, fs, fs)), trainable=True, name="F_x")
        self.v_q = ad.Tensor(rng.normal(0.0, 1.0, size=(2, config.hidden_dim)), trainable=True, name="v_q")

    def block(self, prefix):
        return {k: t for k, t in self.params.tensors.items() if k.startswith(prefix)}

    def head(self, x):
        """
        Fixed random linear read-out of tanh(x) to a scalar
        """
        flat = ad.reshape(ad.tanh(x), (x.size,))
        proj = np.random.default_rng(x.size).normal(size=x.size)
        return ad.weighted_mean(flat, proj * x.size)


def encoders_problem(p):
    params = {**p.block("img."), **p.block("q.")}

    def loss_fn():
        f = encoders.encode_image_batch(p.batch.images, p.params.tensors, p.params.config.image_blocks)
        v = encoders.encode_question_batch(p.batch.tokens, p.batch.lengths, p.params.tensors)
        return ad.add(p.head(ad.global_avg_pool(f)), p.head(v))

    return loss_fn, params


def cga_problem(p):
    params = {"F_x": p.f_x, "v_q": p.v_q, **p.block("cga.")}

    def loss_fn():
        attended, _, _ = cga.cga_forward(p.f_x, p.v_q, p.params.tensors)
        return p.head(attended)

    return loss_fn, params


def cst_problem(p):
    params = {"F_x": p.f_x, "v_q": p.v_q, **p.block("cga.proj"), **p.block("cga.lang"), **p.block("cst.")}

    def loss_fn():
        proj = cga.project(p.f_x, p.v_q, p.params.tensors)
        e1, e2 = cst.cst_forward(proj, p.f_x, p.params.tensors)
        return ad.add(p.head(e1), p.head(e2))

    return loss_fn, params


def model_problem(p):
    params = dict(p.params.tensors)

    def loss_fn():
        logits = vqa_model.forward(p.batch, p.params)
        return ad.mean(vqa_model.sample_loss(logits, p.batch.labels))

    return loss_fn, params


PROBLEMS = {
    "encoders": encoders_problem,
    "cga": cga_problem,
    "cst": cst_problem,
    "model": model_problem,
}


def run_gradcheck(modules=MODULES, step=1e-5, tolerance=1e-4, seed=0):
    """
    @return {module: GradCheckReport}
    """
    reports = {}
    for name in modules:
        loss_fn, params = PROBLEMS[name](MicroProblem(seed))
        reports[name] = ad.finite_diff_check(loss_fn, params, step=step, tolerance=tolerance)
    return reports


def run(args):
    if not 1e-7 <= args.step <= 1e-3:
        raise utils.UsageError(f"--step must be in [1e-7, 1e-3], got {args.step}")

    modules = MODULES if args.module == "all" else (args.module,)

    print("######################################################")
    print(f"# Gradient check: {', '.join(modules)}")
    print("######################################################")

    st = time.time()
    reports = run_gradcheck(modules, args.step, args.tolerance, args.seed)

    failed = []
    for name, report in reports.items():
        block, err = report.worst()
        status = "PASS" if report.passed else "FAIL"
        kinks = sum(report.kinks.values())
        print(f"{status} {name}: worst rel err {err:.3e} ({block}), "
              f"{sum(report.checked.values())} elements checked, {kinks} kink(s) excluded")
        if not report.passed:
            failed.append(name)

    print(f"[INFO] gradient check took {time.time() - st:.1f}s")
    if failed:
        print(f"[ERROR] gradient check failed for: {', '.join(failed)}")
        return 1
    return 0


parser = argparse.ArgumentParser(description="Finite-difference gradient check on seeded micro inputs")
add_arguments(parser)


if __name__ == "__main__":
    load_dotenv()
    args = parser.parse_args()

    exit(run(args))
