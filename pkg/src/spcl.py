########################################################################
# Self-paced curriculum learning
#
#   spl_weight      closed-form soft-regularizer weight max(0, 1 - L/lambda)
#   update_pace     K = 0.5 + 0.1 * t/15, lambda = (max - min) * K + min
#   init_curriculum greedy easiest-first weights under a^T v <= c
#   spcl_epoch      one pass over the training set in a given phase
########################################################################
from dataclasses import dataclass, replace

import numpy as np

import autodiff as ad
import model as vqa_model
import utils


PACE_K0 = 0.5
PACE_STEP = 0.1
PACE_PERIOD = 15.0

DEFAULT_CL_EPOCHS = 15
DEFAULT_TAU0 = 0.5

STRATEGIES = ("shuffle", "spl", "spcl")
PHASE_CL = "CL"
PHASE_SPL = "SPL"
PHASE_UNIFORM = "UNIFORM"

PRIOR_PRESETS = {
    "synthetic": {"rural_urban": 1.0, "presence": 1.0, "comparison": 3.0, "count": 4.0, "area": 4.0},
    "lr": {"rural_urban": 1.0, "presence": 1.0, "comparison": 3.0, "count": 4.0},
    "hr": {"presence": 1.0, "comparison": 3.0, "count": 4.0, "area": 4.0},
    "rsivqa": {"yes_no": 1.0, "others": 2.0, "number": 3.0},
}


class PaceError(ValueError):
    pass


def parse_priors(text):
    """
    Preset name or "type=weight,..." list
    """
    if text in PRIOR_PRESETS:
        return dict(PRIOR_PRESETS[text])

    priors = utils.parse_kv_list(text, float)
    if not priors:
        raise utils.UsageError(f"empty prior table: {text!r}")
    for k, w in priors.items():
        if w <= 0:
            raise utils.UsageError(f"prior weight for {k} must be > 0, got {w}")
    return priors


def spl_weight(loss, lam):
    """
    v = 1 - L/lambda if L <= lambda else 0 (scalar or array)
    """
    if lam <= 0:
        raise PaceError(f"lambda must be > 0, got {lam}")

    v = np.where(np.asarray(loss) <= lam, 1.0 - np.asarray(loss) / lam, 0.0)
    v = np.clip(v, 0.0, 1.0)
    return float(v) if np.ndim(v) == 0 else v


def pace_fraction(t):
    return PACE_K0 + (t / PACE_PERIOD) * PACE_STEP


def update_pace(prev_losses, t):
    """
    @return (K, lambda) for epoch t from the previous epoch's losses
    """
    losses = np.asarray(prev_losses, dtype=np.float64)
    if losses.size == 0:
        raise PaceError("no previous losses to set the pace from")
    if not np.all(np.isfinite(losses)):
        raise PaceError("non-finite previous losses")

    k = pace_fraction(t)
    lo, hi = float(losses.min()), float(losses.max())
    return k, (hi - lo) * k + lo


@dataclass
class CurriculumPrior:
    weights: dict
    lengths: np.ndarray     # token_count / max token_count
    scores: np.ndarray      # a_i = W_i * Q_i

    def budget(self, tau):
        return tau * float(self.scores.sum())


def ranking_scores(qtypes, token_counts, priors):
    """
    a_i = W(type_i) * tokens_i / max(tokens)
    """
    missing = sorted(set(qtypes) - set(priors))
    if missing:
        raise PaceError(f"no prior weight for question type(s): {', '.join(missing)}")

    counts = np.asarray(token_counts, dtype=np.float64)
    if counts.size == 0 or counts.max() <= 0:
        raise PaceError("max token count must be > 0")

    lengths = counts / counts.max()
    weights = np.array([priors[q] for q in qtypes], dtype=np.float64)
    return CurriculumPrior(weights=dict(priors), lengths=lengths, scores=weights * lengths)


def curriculum_cost(a, v):
    return float(np.dot(a, v))


def init_curriculum(a, tau):
    """
    Easiest-first weights: ascending a (ties by index), weight 1 while the
    budget c = tau * sum(a) allows, one fractional weight to exhaust it,
    0 afterwards. a^T v <= c holds under curriculum_cost.
    """
    if not 0.0 < tau <= 1.0:
        raise PaceError(f"curriculum fraction must be in (0, 1], got {tau}")

    a = np.asarray(a, dtype=np.float64)
    v = np.zeros_like(a)
    if tau == 1.0:
        v[:] = 1.0
        return v

    c = tau * float(a.sum())
    used = 0.0
    for i in np.argsort(a, kind="stable"):
        if used + a[i] <= c:
            v[i] = 1.0
            used += a[i]
            continue

        v[i] = max(0.0, (c - used) / a[i])
        break

    # np.dot can re-sum above c by a few ulps; shave the hardest included weight
    for _ in range(64):
        excess = curriculum_cost(a, v) - c
        if excess <= 0:
            break

        j = max((i for i in range(len(v)) if v[i] > 0), key=lambda i: (a[i], i))
        v[j] = max(0.0, v[j] - max(2.0 * excess / a[j], float(np.spacing(v[j]))))

    return v


def curriculum_tau(t, cl_epochs, tau0):
    """
    Linear from tau0 at t=0 to 1.0 at t=cl_epochs
    """
    if cl_epochs <= 0:
        return 1.0
    return min(1.0, tau0 + (1.0 - tau0) * t / cl_epochs)


def phase_for(strategy, t, cl_epochs, has_prev_losses):
    if strategy not in STRATEGIES:
        raise PaceError(f"unknown strategy: {strategy}")

    if strategy == "shuffle":
        return PHASE_UNIFORM
    if strategy == "spcl" and t < cl_epochs:
        return PHASE_CL
    return PHASE_SPL if has_prev_losses else PHASE_UNIFORM


@dataclass
class PaceState:
    t: int = 0
    K: float = None
    lam: float = None
    prev_losses: np.ndarray = None
    v: np.ndarray = None


@dataclass
class EpochResult:
    phase: str
    losses: np.ndarray
    weights: np.ndarray
    mean_objective: float
    fallback_batches: int = 0


def batch_order(num_samples, seed, t):
    return np.random.default_rng([seed, t]).permutation(num_samples)


def spcl_epoch(params, optimizer, num_samples, batch_for, state, phase,
               batch_size=64, seed=0, curriculum=None, cl_epochs=DEFAULT_CL_EPOCHS, tau0=DEFAULT_TAU0):
    """
    One epoch in the given phase.

    CL:      v fixed from init_curriculum with tau growing towards 1
    SPL:     lambda from the previous epoch's losses, v per batch from
             the current losses
    UNIFORM: v = 1 (plain shuffled training)

    @param batch_for callable(indices) -> model.Batch
    @return (params, next PaceState, EpochResult)
    """
    # only SPL epochs have a lambda
    k, lam = pace_fraction(state.t), None
    if phase == PHASE_CL:
        if curriculum is None:
            raise PaceError("CL phase needs a curriculum prior")
        fixed_v = init_curriculum(curriculum.scores, curriculum_tau(state.t, cl_epochs, tau0))
    elif phase == PHASE_SPL:
        if state.prev_losses is None:
            raise PaceError("SPL phase needs the previous epoch's losses")
        k, lam = update_pace(state.prev_losses, state.t)
    elif phase != PHASE_UNIFORM:
        raise PaceError(f"unknown phase: {phase}")

    losses = np.zeros(num_samples)
    weights = np.zeros(num_samples)
    objective_sum = 0.0
    fallback = 0

    degenerate = lam is not None and lam <= 0
    if degenerate:
        print(f"[WARN] epoch {state.t}: lambda={lam:.6g} (all previous losses are 0), "
              f"uniform weights for every batch")

    order = batch_order(num_samples, seed, state.t)
    for start in range(0, num_samples, batch_size):
        idx = order[start:start + batch_size]
        batch = batch_for(idx)

        with ad.GradientTape() as tape:
            logits = vqa_model.forward(batch, params)
            sample_losses = vqa_model.sample_loss(logits, batch.labels)

            current = sample_losses.data.copy()
            if phase == PHASE_CL:
                v = fixed_v[idx]
            elif phase == PHASE_SPL and not degenerate:
                v = spl_weight(current, lam)
            else:
                v = np.ones(len(idx))

            if degenerate:
                fallback += 1
            elif not np.any(v > 0):
                print(f"[WARN] epoch {state.t} {phase}: every weight in a batch of {len(idx)} is 0, "
                      f"falling back to uniform weights")
                v = np.ones(len(idx))
                fallback += 1

            objective = ad.weighted_mean(sample_losses, v)

        losses[idx] = current
        weights[idx] = v

        grads = ad.backward(tape, objective)
        optimizer.step(grads)
        objective_sum += objective.item() * len(idx)

    result = EpochResult(
        phase=phase,
        losses=losses,
        weights=weights,
        mean_objective=objective_sum / num_samples,
        fallback_batches=fallback,
    )
    next_state = replace(state, t=state.t + 1, K=k, lam=lam, prev_losses=losses, v=weights)
    return params, next_state, result
