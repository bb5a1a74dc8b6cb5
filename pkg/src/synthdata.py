########################################################################
# Synthetic scenes, renders and template questions
#
# Every random draw comes from a counter-based Philox generator keyed
# by (seed, scene index, stream), so scenes are independent of the
# order they are generated in.
########################################################################
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

import utils


CATEGORIES = ("empty", "building_small", "building_large", "road", "water", "tree", "field")
CATEGORY_CODES = {
    "empty": "e",
    "building_small": "s",
    "building_large": "l",
    "road": "r",
    "water": "w",
    "tree": "t",
    "field": "f",
}
CODE_CATEGORIES = {v: k for k, v in CATEGORY_CODES.items()}
BUILDINGS = ("building_small", "building_large")

NOUNS = {
    "building_small": ("small building", "small buildings"),
    "building_large": ("large building", "large buildings"),
    "road": ("road", "roads"),
    "water": ("water area", "water areas"),
    "tree": ("tree", "trees"),
    "field": ("field", "fields"),
}
OBJECTS = tuple(c for c in CATEGORIES if c != "empty")

PALETTE = {
    "empty": (196, 184, 150),
    "building_small": (220, 60, 50),
    "building_large": (130, 30, 90),
    "road": (90, 90, 90),
    "water": (40, 90, 200),
    "tree": (20, 120, 40),
    "field": (170, 210, 70),
}

QUESTION_TYPES = ("rural_urban", "presence", "comparison", "area", "count")
ANSWER_CLASSES = (
    "yes", "no",
    "rural", "urban",
    "zero", "small", "medium", "large",
    "0", "1", "2", "3", "4", "5-10", "11+",
)
SPLITS = ("train", "val", "test")

DEFAULT_CATEGORY_PROBS = (0.30, 0.14, 0.08, 0.14, 0.12, 0.12, 0.10)
DEFAULT_QUESTIONS = {"rural_urban": 1, "presence": 2, "comparison": 1, "area": 1, "count": 1}
COUNT_CAP = 16
NOISE_AMPLITUDE = 8

STREAM_LAYOUT = 0
STREAM_CELLS = 1
STREAM_NOISE = 2
STREAM_QUESTIONS = 3
STREAM_SPLIT = 4
STREAM_SUBSET = 5


class DatasetError(ValueError):
    pass


def philox(seed, index, stream):
    """
    Counter-based generator keyed by (seed, index, stream)
    """
    if seed < 0 or index < 0:
        raise DatasetError(f"seed and index must be >= 0, got {seed}, {index}")

    key = (int(seed) << 64) | (int(index) * 8 + stream)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 8
    urban_threshold: float = 0.15
    category_probs: tuple = DEFAULT_CATEGORY_PROBS
    active_prob: float = 0.5

    def validate(self):
        if self.grid_size < 2:
            raise DatasetError(f"grid size must be >= 2, got {self.grid_size}")

        probs = np.asarray(self.category_probs, dtype=np.float64)
        if probs.shape != (len(CATEGORIES),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DatasetError(f"invalid probability vector: {self.category_probs}")

        if not 0.0 <= self.active_prob <= 1.0:
            raise DatasetError(f"active_prob must be in [0, 1], got {self.active_prob}")

        return self


@dataclass
class Scene:
    scene_id: str
    grid: np.ndarray        # G×G category indices
    urban: bool

    @property
    def grid_size(self):
        return self.grid.shape[0]

    @property
    def label(self):
        return "urban" if self.urban else "rural"

    def counts(self):
        tally = np.bincount(self.grid.reshape(-1), minlength=len(CATEGORIES))
        return {c: int(tally[i]) for i, c in enumerate(CATEGORIES)}

    def codes(self):
        return "".join(CATEGORY_CODES[CATEGORIES[i]] for i in self.grid.reshape(-1))

    @classmethod
    def from_codes(cls, scene_id, codes, label):
        size = int(round(len(codes) ** 0.5))
        if size * size != len(codes) or any(ch not in CODE_CATEGORIES for ch in codes):
            raise DatasetError(f"bad scene grid for {scene_id}: {codes!r}")
        if label not in ("rural", "urban"):
            raise DatasetError(f"bad urban label for {scene_id}: {label!r}")

        grid = np.array([CATEGORIES.index(CODE_CATEGORIES[ch]) for ch in codes], dtype=np.int64)
        return cls(scene_id, grid.reshape(size, size), label == "urban")

    def __eq__(self, other):
        return (isinstance(other, Scene) and self.scene_id == other.scene_id
                and self.urban == other.urban and np.array_equal(self.grid, other.grid))


@dataclass
class Triplet:
    id: str
    image: str
    question: str
    answer: str
    qtype: str
    scene_id: str


def scene_name(index):
    return f"s{index:05d}"


def generate_scene(seed, index, config=SceneConfig()):
    """
    Cells drawn independently from category_probs restricted to
    {empty} + the categories active in this scene
    """
    config.validate()
    g = config.grid_size

    active = philox(seed, index, STREAM_LAYOUT).random(len(OBJECTS)) < config.active_prob
    probs = np.asarray(config.category_probs, dtype=np.float64).copy()
    probs[1:] *= active
    if probs.sum() <= 0:
        probs = np.asarray(config.category_probs, dtype=np.float64).copy()
    cdf = np.cumsum(probs / probs.sum())

    draws = philox(seed, index, STREAM_CELLS).random(g * g)
    cells = np.minimum(np.searchsorted(cdf, draws, side="right"), len(CATEGORIES) - 1)
    grid = cells.reshape(g, g).astype(np.int64)

    buildings = sum(int(np.sum(grid == CATEGORIES.index(b))) for b in BUILDINGS)
    urban = buildings / (g * g) >= config.urban_threshold

    return Scene(scene_name(index), grid, bool(urban))


def render(scene, image_size, seed, index, noise=NOISE_AMPLITUDE):
    """
    Filled block per cell, small buildings at half cell size on the empty
    background, then seeded uniform noise in [-noise, noise].
    """
    g = scene.grid_size
    if image_size % g:
        raise DatasetError(f"image size {image_size} not divisible by grid size {g}")

    cell = image_size // g
    half = cell // 2
    offset = (cell - half) // 2
    img = np.zeros((image_size, image_size, 3), dtype=np.int64)

    for r in range(g):
        for c in range(g):
            category = CATEGORIES[scene.grid[r, c]]
            y, x = r * cell, c * cell

            if category == "building_small":
                img[y:y + cell, x:x + cell] = PALETTE["empty"]
                img[y + offset:y + offset + half, x + offset:x + offset + half] = PALETTE[category]
            else:
                img[y:y + cell, x:x + cell] = PALETTE[category]

    if noise:
        img += philox(seed, index, STREAM_NOISE).integers(-noise, noise + 1, size=img.shape)

    return np.clip(img, 0, 255).astype(np.uint8)


########################################################################
# Questions
########################################################################
def bin_count(n):
    n = min(n, COUNT_CAP)
    if n <= 4:
        return str(n)
    if n <= 10:
        return "5-10"
    return "11+"


def bin_area(n):
    if n == 0:
        return "zero"
    if n <= 4:
        return "small"
    if n <= 12:
        return "medium"
    return "large"


def _template(qtype, args):
    if qtype == "rural_urban":
        return "Is it a rural or an urban area?"
    if qtype == "presence":
        return f"Is a {NOUNS[args[0]][0]} present?"
    if qtype == "comparison":
        return f"Are there more {NOUNS[args[0]][1]} than {NOUNS[args[1]][1]}?"
    if qtype == "count":
        return f"What is the amount of {NOUNS[args[0]][1]}?"
    if qtype == "area":
        return f"What is the area covered by {NOUNS[args[0]][1]}?"
    raise DatasetError(f"unknown question type: {qtype}")


def _answer(qtype, args, counts, label):
    if qtype == "rural_urban":
        return label
    if qtype == "presence":
        return "yes" if counts[args[0]] > 0 else "no"
    if qtype == "comparison":
        return "yes" if counts[args[0]] > counts[args[1]] else "no"
    if qtype == "count":
        return bin_count(counts[args[0]])
    return bin_area(counts[args[0]])


def instantiate_questions(scene, per_type_counts, seed, index):
    """
    Fill the fixed templates with categories drawn per scene; answers
    come from the scene metadata only.
    """
    rng = philox(seed, index, STREAM_QUESTIONS)
    counts = scene.counts()
    triplets = []

    for qtype in QUESTION_TYPES:
        n = per_type_counts.get(qtype, 0)
        if n < 0:
            raise DatasetError(f"negative question count for {qtype}")

        for _ in range(n):
            if qtype == "rural_urban":
                args = ()
            elif qtype == "comparison":
                a, b = rng.choice(len(OBJECTS), size=2, replace=False)
                args = (OBJECTS[a], OBJECTS[b])
            else:
                args = (OBJECTS[rng.integers(len(OBJECTS))],)

            triplets.append(Triplet(
                id=f"{scene.scene_id}_q{len(triplets)}",
                image=f"images/{scene.scene_id}.ppm",
                question=_template(qtype, args),
                answer=_answer(qtype, args, counts, scene.label),
                qtype=qtype,
                scene_id=scene.scene_id,
            ))

    return triplets


########################################################################
# Independent answer evaluator: parses the question text back and reads
# the answer straight off the scene's cell codes.
########################################################################
_PLURALS = {plural: c for c, (_, plural) in NOUNS.items()}
_SINGULARS = {singular: c for c, (singular, _) in NOUNS.items()}

_RULES = [
    (re.compile(r"^Is it a rural or an urban area\?$"), "rural_urban"),
    (re.compile(r"^Is a (.+) present\?$"), "presence"),
    (re.compile(r"^Are there more (.+) than (.+)\?$"), "comparison"),
    (re.compile(r"^What is the amount of (.+)\?$"), "count"),
    (re.compile(r"^What is the area covered by (.+)\?$"), "area"),
]


def evaluate_answer(question, codes, urban_label):
    for pattern, qtype in _RULES:
        m = pattern.match(question)
        if not m:
            continue

        if qtype == "rural_urban":
            return qtype, urban_label

        names = _SINGULARS if qtype == "presence" else _PLURALS
        tallies = [codes.count(CATEGORY_CODES[names[noun]]) for noun in m.groups()]

        if qtype == "presence":
            return qtype, ("no", "yes")[tallies[0] > 0]
        if qtype == "comparison":
            return qtype, ("no", "yes")[tallies[0] > tallies[1]]

        n = tallies[0]
        if qtype == "count":
            n = min(n, COUNT_CAP)
            return qtype, str(n) if n < 5 else ("5-10" if n < 11 else "11+")

        return qtype, "zero" if n == 0 else "small" if n < 5 else "medium" if n < 13 else "large"

    raise DatasetError(f"question matches no template: {question!r}")


########################################################################
# Dataset
########################################################################
@dataclass
class Dataset:
    triplets: list
    scenes: dict                  # scene_id -> Scene
    images: dict                  # scene_id -> uint8 H×W×3
    splits: dict                  # scene_id -> split name
    meta: dict = field(default_factory=dict)

    def split(self, name):
        if name not in SPLITS:
            raise DatasetError(f"unknown split: {name}")
        return [t for t in self.triplets if self.splits[t.scene_id] == name]

    def image_for(self, triplet):
        return self.images[triplet.scene_id]

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and self.triplets == other.triplets
                and self.scenes == other.scenes
                and self.splits == other.splits
                and self.images.keys() == other.images.keys()
                and all(np.array_equal(self.images[k], other.images[k]) for k in self.images))


def assign_splits(scene_ids, seed, fractions=(0.8, 0.1, 0.1)):
    n = len(scene_ids)
    order = philox(seed, 0, STREAM_SPLIT).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)

    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    splits = {}
    for i, scene_id in enumerate(scene_ids):
        splits[scene_id] = "train" if rank[i] < n_train else "val" if rank[i] < n_train + n_val else "test"
    return splits


def generate_dataset(num_scenes, seed, config=SceneConfig(), image_size=64, per_type_counts=None):
    if num_scenes <= 0:
        raise DatasetError("empty dataset: number of scenes must be > 0")

    config.validate()
    per_type_counts = dict(DEFAULT_QUESTIONS if per_type_counts is None else per_type_counts)
    unknown = set(per_type_counts) - set(QUESTION_TYPES)
    if unknown:
        raise DatasetError(f"unknown question type(s): {sorted(unknown)}")

    scenes, images, triplets = {}, {}, []
    for index in range(num_scenes):
        scene = generate_scene(seed, index, config)
        scenes[scene.scene_id] = scene
        images[scene.scene_id] = render(scene, image_size, seed, index)
        triplets.extend(instantiate_questions(scene, per_type_counts, seed, index))

    if not triplets:
        raise DatasetError("empty dataset: no questions generated")

    splits = assign_splits(list(scenes), seed)
    return Dataset(triplets, scenes, images, splits)


def subset_by_scene(triplets, fraction, seed):
    """
    Deterministic per-scene subset keeping about `fraction` of the scenes
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(triplets)

    scene_ids = sorted({t.scene_id for t in triplets})
    keep_n = max(1, int(round(fraction * len(scene_ids))))
    order = philox(seed, 0, STREAM_SUBSET).permutation(len(scene_ids))
    keep = {scene_ids[i] for i in order[:keep_n]}

    return [t for t in triplets if t.scene_id in keep]


########################################################################
# Disk format
########################################################################
INDEX_HEADER = ["id", "image", "question", "answer", "qtype", "scene_id"]
SCENES_HEADER = ["scene_id", "grid", "urban_label"]
SPLITS_HEADER = ["scene_id", "split"]
CHECKSUMS_HEADER = ["image", "md5"]


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(row) + "\n")


def _read_tsv(path, header):
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")

    if not lines or lines[0].split("\t") != header:
        raise DatasetError(f"{path}: line 1: expected header {header}")

    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue

        parts = line.split("\t")
        if len(parts) != len(header) or any(p == "" for p in parts):
            raise DatasetError(f"{os.path.basename(path)}: malformed line {lineno}: {line!r}")

        rows.append((lineno, parts))
    return rows


def write_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PPM")


def read_image(path):
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PPM" or img.mode != "RGB":
                raise DatasetError(f"bad image header: {path} is {img.format}/{img.mode}, expected binary RGB PPM")
            return np.asarray(img, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DatasetError(f"bad image header: {path}: {e}")


def write_dataset(dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)

    checksums = []
    for scene_id in sorted(dataset.images):
        rel = f"images/{scene_id}.ppm"
        path = os.path.join(directory, rel)
        write_image(path, dataset.images[scene_id])

        with open(path, "rb") as f:
            checksums.append([rel, utils.hashcode_md5(f.read())])

    _write_tsv(os.path.join(directory, "index.tsv"), INDEX_HEADER,
               [[t.id, t.image, t.question, t.answer, t.qtype, t.scene_id] for t in dataset.triplets])
    _write_tsv(os.path.join(directory, "scenes.tsv"), SCENES_HEADER,
               [[s.scene_id, s.codes(), s.label] for s in dataset.scenes.values()])
    _write_tsv(os.path.join(directory, "splits.tsv"), SPLITS_HEADER,
               [[sid, split] for sid, split in dataset.splits.items()])
    _write_tsv(os.path.join(directory, "checksums.tsv"), CHECKSUMS_HEADER, checksums)


def read_dataset(directory):
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory not found: {directory}")

    scenes = {}
    for lineno, (scene_id, codes, label) in _read_tsv(os.path.join(directory, "scenes.tsv"), SCENES_HEADER):
        scenes[scene_id] = Scene.from_codes(scene_id, codes, label)

    splits = {}
    for lineno, (scene_id, split) in _read_tsv(os.path.join(directory, "splits.tsv"), SPLITS_HEADER):
        if split not in SPLITS:
            raise DatasetError(f"splits.tsv: line {lineno}: unknown split {split!r}")
        splits[scene_id] = split

    checksums = {rel: md5 for _, (rel, md5) in _read_tsv(os.path.join(directory, "checksums.tsv"), CHECKSUMS_HEADER)}

    triplets = []
    images = {}
    for lineno, parts in _read_tsv(os.path.join(directory, "index.tsv"), INDEX_HEADER):
        t = Triplet(*parts)
        if t.qtype not in QUESTION_TYPES:
            raise DatasetError(f"index.tsv: line {lineno}: unknown question type {t.qtype!r}")
        if t.scene_id not in scenes or t.scene_id not in splits:
            raise DatasetError(f"index.tsv: line {lineno}: unknown scene {t.scene_id!r} for {t.id}")

        if t.scene_id not in images:
            path = os.path.join(directory, t.image)
            if not os.path.isfile(path):
                raise DatasetError(f"missing image file for {t.id}: {t.image}")

            images[t.scene_id] = read_image(path)

            with open(path, "rb") as f:
                digest = utils.hashcode_md5(f.read())
            if checksums.get(t.image) != digest:
                raise DatasetError(f"checksum mismatch for {t.image} (referenced by {t.id})")

        triplets.append(t)

    if not triplets:
        raise DatasetError(f"empty dataset: {directory}")

    return Dataset(triplets, scenes, images, splits)


def summarize(dataset):
    """
    Per-type counts and per-type answer histograms
    """
    per_type = {q: 0 for q in QUESTION_TYPES}
    answers = {q: {} for q in QUESTION_TYPES}
    for t in dataset.triplets:
        per_type[t.qtype] += 1
        answers[t.qtype][t.answer] = answers[t.qtype].get(t.answer, 0) + 1

    split_sizes = {s: sum(1 for v in dataset.splits.values() if v == s) for s in SPLITS}
    return per_type, answers, split_sizes
