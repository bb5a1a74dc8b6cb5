"""
Full VQA classifier: image/question encoders, cross-modal global
attention and spatial transformers, pooled fusion and a two-layer
classifier over a fixed answer vocabulary.
"""
import os
import math
from dataclasses import dataclass, asdict, fields
from multiprocessing.pool import ThreadPool

import numpy as np

import autodiff as ad
import cga
import cst
import encoders
from stats import TypeStats


MAGIC = b"SPCLVQA"
VERSION = b"1"
FUSIONS = ("product", "sum", "concat")
VARIANTS = {
    "baseline": {"use_cga": False, "use_cst": False},
    "cga": {"use_cga": True, "use_cst": False},
    "cst": {"use_cga": False, "use_cst": True},
    "mll": {"use_cga": True, "use_cst": True},
}


class ModelFileError(ValueError):
    pass


class ShapeMismatchError(ModelFileError):
    pass


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    image_blocks: tuple = encoders.DEFAULT_IMAGE_BLOCKS
    embed_dim: int = encoders.DEFAULT_EMBED_DIM
    hidden_dim: int = encoders.DEFAULT_HIDDEN_DIM
    classifier_hidden: int = 128
    max_tokens: int = encoders.DEFAULT_MAX_TOKENS
    fusion: str = "product"
    use_cga: bool = True
    use_cst: bool = True
    s_max: float = cst.S_MAX

    @property
    def channels(self):
        return self.image_blocks[-1][0]

    @property
    def feature_size(self):
        return self.image_size // encoders.downsampling_factor(self.image_blocks)

    @classmethod
    def from_variant(cls, variant, **kwargs):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant: {variant}")
        return cls(**VARIANTS[variant], **kwargs)

    def validate(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion: {self.fusion}")
        if self.channels % 2:
            raise cst.CSTError(f"odd channel count: {self.channels}")
        if self.image_size % encoders.downsampling_factor(self.image_blocks):
            raise encoders.EncoderError("image size not divisible by the downsampling factor")
        return self

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if k == "image_blocks":
                v = ";".join(f"{c}x{s}" for c, s in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue

            k, v = line.split("=", 1)
            if k not in kinds:
                raise ModelFileError(f"unknown config key in model file: {k}")

            if k == "image_blocks":
                values[k] = tuple(tuple(int(x) for x in b.split("x")) for b in v.split(";"))
            elif kinds[k] in (bool, "bool"):
                values[k] = v == "True"
            elif kinds[k] in (int, "int"):
                values[k] = int(v)
            elif kinds[k] in (float, "float"):
                values[k] = float(v)
            else:
                values[k] = v

        return cls(**values)


def _init_arrays(config, vocab_size, num_answers, rng):
    c = config.channels
    hid = config.hidden_dim
    arrays = {}
    arrays.update(encoders.init_image_encoder(rng, config.image_blocks))
    arrays.update(encoders.init_question_encoder(rng, vocab_size, config.embed_dim, hid))
    arrays.update(cga.init_cga(rng, c, hid))
    arrays.update(cst.init_localizers(c // 2, config.s_max))

    fused = 2 * hid if config.fusion == "concat" else hid
    arrays.update({
        "fuse.vis.w": rng.normal(0.0, 1.0 / math.sqrt(3 * c), size=(3 * c, hid)),
        "fuse.vis.b": np.zeros(hid),
        "fuse.lang.w": rng.normal(0.0, 1.0 / math.sqrt(hid), size=(hid, hid)),
        "fuse.lang.b": np.zeros(hid),
        "cls.hidden.w": rng.normal(0.0, math.sqrt(2.0 / fused), size=(fused, config.classifier_hidden)),
        "cls.hidden.b": np.zeros(config.classifier_hidden),
        "cls.out.w": rng.normal(0.0, 1.0 / math.sqrt(config.classifier_hidden),
                                size=(config.classifier_hidden, num_answers)),
        "cls.out.b": np.zeros(num_answers),
    })
    return arrays


class ModelParams:
    """
    Named trainable tensors plus everything needed to rebuild the
    model: config, question vocabulary and answer list.
    """

    def __init__(self, tensors, config, vocab, answers):
        self.tensors = tensors
        self.config = config
        self.vocab = vocab
        self.answers = list(answers)
        self.answer_to_index = {a: i for i, a in enumerate(self.answers)}

    @classmethod
    def init(cls, config, vocab, answers, seed=0):
        config.validate()
        rng = np.random.default_rng(seed)
        arrays = _init_arrays(config, len(vocab), len(answers), rng)
        tensors = {k: ad.Tensor(v, trainable=True, name=k) for k, v in arrays.items()}
        return cls(tensors, config, vocab, answers)

    def expected_shapes(self):
        arrays = _init_arrays(self.config, len(self.vocab), len(self.answers), np.random.default_rng(0))
        return {k: v.shape for k, v in arrays.items()}

    def __getitem__(self, key):
        return self.tensors[key]

    def __contains__(self, key):
        return key in self.tensors

    def keys(self):
        return self.tensors.keys()

    def answer_index(self, answer):
        if answer not in self.answer_to_index:
            raise VocabularyMismatchError(f"answer {answer!r} not in the model's answer vocabulary")
        return self.answer_to_index[answer]

    def num_parameters(self):
        return sum(t.size for t in self.tensors.values())

    def equals(self, other):
        return (self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in self.tensors)
                and self.answers == other.answers
                and self.vocab == other.vocab
                and self.config == other.config)


########################################################################
# Batches and forward pass
########################################################################
@dataclass
class Batch:
    ids: list
    qtypes: list
    images: np.ndarray      # float N×3×H×W in [0,1]
    tokens: np.ndarray      # N×T indices
    lengths: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


def make_batch(triplets, dataset, params):
    config = params.config
    images = encoders.prepare_images(
        np.stack([dataset.image_for(t) for t in triplets]), config.image_blocks)
    tokens, lengths = encoders.encode_tokens(
        [encoders.tokenize(t.question) for t in triplets], params.vocab, config.max_tokens)
    labels = np.array([params.answer_index(t.answer) for t in triplets], dtype=np.int64)

    return Batch(
        ids=[t.id for t in triplets],
        qtypes=[t.qtype for t in triplets],
        images=images,
        tokens=tokens,
        lengths=lengths,
        labels=labels,
    )


def standardize(x, eps=1e-12):
    """
    Per-sample zero mean and unit RMS over the feature axis of an N×D
    tensor; invariant to a positive rescaling of x.
    """
    d = x.shape[1]
    centered = ad.matmul(x, np.eye(d) - 1.0 / d)
    return ad.scale(ad.l2_normalize(centered, axis=1, eps=eps), math.sqrt(d))


@dataclass
class ForwardDetails:
    attention: np.ndarray = None
    transforms: tuple = ()
    visual: np.ndarray = None


def forward(batch, params, details=None):
    """
    images + questions -> answer logits N×|answers|

    @param details optional ForwardDetails filled with attention weights,
                   the two affine transforms and the visual code
    """
    p = params.tensors
    config = params.config

    f_x = encoders.encode_image_batch(batch.images, p, config.image_blocks)
    v_q = encoders.encode_question_batch(batch.tokens, batch.lengths, p)

    attended, proj, weights = cga.cga_forward(f_x, v_q, p, mode="full" if config.use_cga else "uniform")
    e1, e2, transforms = cst.cst_forward(
        proj, f_x, p,
        mode="full" if config.use_cst else "identity",
        s_max=config.s_max,
        return_transforms=True,
    )

    pooled = ad.concat([ad.global_avg_pool(attended), ad.global_avg_pool(e1), ad.global_avg_pool(e2)], axis=1)
    vis = ad.tanh(ad.linear(standardize(pooled), p["fuse.vis.w"], p["fuse.vis.b"]))
    lang = ad.tanh(ad.linear(v_q, p["fuse.lang.w"], p["fuse.lang.b"]))

    if config.fusion == "product":
        fused = ad.multiply(vis, lang)
    elif config.fusion == "sum":
        fused = ad.add(vis, lang)
    else:
        fused = ad.concat([vis, lang], axis=1)

    hidden = ad.relu(ad.linear(fused, p["cls.hidden.w"], p["cls.hidden.b"]))
    logits = ad.linear(hidden, p["cls.out.w"], p["cls.out.b"])

    if details is not None:
        details.attention = weights
        details.transforms = transforms
        details.visual = vis.data.copy()

    return logits


def sample_loss(logits, labels):
    """
    Per-sample cross-entropy, one value per row of logits
    """
    return ad.cross_entropy(logits, labels)


def predict(batch, params):
    with ad.no_tape():
        logits = forward(batch, params)
    return np.argmax(logits.data, axis=1)


########################################################################
# Metrics
########################################################################
@dataclass
class MetricsReport:
    per_type: dict          # type -> accuracy, or None when the type has no samples
    counts: dict            # type -> (correct, total)
    average_accuracy: float
    overall_accuracy: float

    @classmethod
    def from_counts(cls, counts):
        per_type = {}
        for t, (correct, total) in counts.items():
            per_type[t] = correct / total if total else None

        present = [a for a in per_type.values() if a is not None]
        total_correct = sum(c for c, _ in counts.values())
        total = sum(n for _, n in counts.values())

        return cls(
            per_type=per_type,
            counts=dict(counts),
            average_accuracy=sum(present) / len(present) if present else 0.0,
            overall_accuracy=total_correct / total if total else 0.0,
        )

    def rows(self):
        rows = []
        for t, acc in self.per_type.items():
            if acc is None:
                continue
            correct, total = self.counts[t]
            rows.append((t, f"{acc:.6f}", str(correct), str(total)))

        correct = sum(c for c, _ in self.counts.values())
        total = sum(n for _, n in self.counts.values())
        rows.append(("AA", f"{self.average_accuracy:.6f}", "", ""))
        rows.append(("OA", f"{self.overall_accuracy:.6f}", str(correct), str(total)))
        return rows

    def to_csv(self):
        lines = ["type,accuracy,correct,total"] + [",".join(r) for r in self.rows()]
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_csv())

    def print(self):
        for t, acc, correct, total in self.rows():
            print(f" - {t}: {acc} ({correct}/{total})" if total else f" - {t}: {acc}")


def _evaluate_chunk(args):
    triplets, dataset, params, batch_size, types = args
    stats = TypeStats("eval", types)

    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start:start + batch_size]
        batch = make_batch(chunk, dataset, params)
        pred = predict(batch, params)

        for qtype, ok in zip(batch.qtypes, pred == batch.labels):
            stats.add(qtype, bool(ok))

    return stats


def evaluate(params, triplets, dataset, types, batch_size=64, workers=1):
    """
    Argmax accuracy per question type, AA over non-empty types, and OA.
    Shards are merged in shard order so results do not depend on workers.
    """
    if not triplets:
        raise ValueError("cannot evaluate an empty split")

    workers = max(1, int(workers))
    shard = int(math.ceil(len(triplets) / workers))
    shards = [(triplets[i:i + shard], dataset, params, batch_size, types)
              for i in range(0, len(triplets), shard)]

    if workers == 1 or len(shards) == 1:
        results = [_evaluate_chunk(s) for s in shards]
    else:
        with ThreadPool(workers) as pool:
            results = pool.map(_evaluate_chunk, shards)

    total = TypeStats("eval", types)
    for r in results:
        total.merge(r)

    return MetricsReport.from_counts(total.counts())


########################################################################
# Model file
#
#   b"SPCLVQA1"
#   manifest: "key<TAB>dtype<TAB>d1,d2,..." lines, then an empty line
#   payload: little-endian float64 per float key / utf-8 bytes per text
#            key, in manifest order
########################################################################
META_CONFIG = "meta.config"
META_VOCAB = "meta.vocab"
META_ANSWERS = "meta.answers"


def save(params, path):
    entries = []
    payload = []

    texts = [
        (META_CONFIG, params.config.to_text()),
        (META_VOCAB, params.vocab.to_tsv()),
        (META_ANSWERS, "".join(f"{a}\n" for a in params.answers)),
    ]
    for key, text in texts:
        raw = text.encode("utf-8")
        entries.append(f"{key}\tutf8\t{len(raw)}")
        payload.append(raw)

    for key, t in params.tensors.items():
        entries.append(f"{key}\tfloat64\t{','.join(str(d) for d in t.shape)}")
        payload.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    blob = MAGIC + VERSION + "\n".join(entries).encode("utf-8") + b"\n\n" + b"".join(payload)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _parse_manifest(blob, path):
    if len(blob) < len(MAGIC) + 1 or blob[:len(MAGIC)] != MAGIC:
        raise ModelFileError(f"bad magic in {path}")

    version = blob[len(MAGIC):len(MAGIC) + 1]
    if version != VERSION:
        raise ModelFileError(f"version mismatch in {path}: file {version!r}, expected {VERSION!r}")

    end = blob.find(b"\n\n", len(MAGIC) + 1)
    if end < 0:
        raise ModelFileError(f"truncated file {path}: manifest not terminated")

    entries = []
    for lineno, line in enumerate(blob[len(MAGIC) + 1:end].decode("utf-8").split("\n"), 1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in ("float64", "utf8"):
            raise ModelFileError(f"malformed manifest line {lineno} in {path}: {line!r}")

        key, dtype, dims = parts
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        entries.append((key, dtype, shape))

    return entries, end + 2


def load(path, template=None):
    """
    Read a model file. Shapes are checked against the architecture the
    file's own config describes and, if given, against `template`.
    """
    if not os.path.exists(path):
        raise ModelFileError(f"model file not found: {path}")

    with open(path, "rb") as f:
        blob = f.read()

    entries, offset = _parse_manifest(blob, path)

    texts = {}
    arrays = {}
    for key, dtype, shape in entries:
        nbytes = shape[0] if dtype == "utf8" else 8 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise ModelFileError(f"truncated file {path}: payload ends inside {key}")

        chunk = blob[offset:offset + nbytes]
        offset += nbytes

        if dtype == "utf8":
            texts[key] = chunk.decode("utf-8")
        else:
            arrays[key] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)

    if offset != len(blob):
        raise ModelFileError(f"trailing bytes in {path}")

    for key in (META_CONFIG, META_VOCAB, META_ANSWERS):
        if key not in texts:
            raise ModelFileError(f"missing {key} in {path}")

    config = ModelConfig.from_text(texts[META_CONFIG])
    vocab = encoders.Vocabulary.from_tsv(texts[META_VOCAB])
    answers = [a for a in texts[META_ANSWERS].split("\n") if a]

    tensors = {k: ad.Tensor(v, trainable=True, name=k) for k, v in arrays.items()}
    params = ModelParams(tensors, config, vocab, answers)

    _check_shapes(arrays, params.expected_shapes(), "manifest")
    if template is not None:
        _check_shapes(arrays, {k: t.shape for k, t in template.tensors.items()}, "template")

    return params


def _check_shapes(arrays, expected, against):
    for key, shape in expected.items():
        if key not in arrays:
            raise ShapeMismatchError(f"missing key {key} (expected by {against})")
        if arrays[key].shape != tuple(shape):
            raise ShapeMismatchError(
                f"shape mismatch for {key}: file {list(arrays[key].shape)}, {against} {list(shape)}")

    extra = set(arrays) - set(expected)
    if extra:
        raise ShapeMismatchError(f"unexpected key(s) {sorted(extra)} (not in {against})")
