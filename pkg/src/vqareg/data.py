"""Synthetic changing-priors VQA benchmark.

Scenes are bags of K object detections whose features are category/attribute
prototype vectors plus Gaussian noise, so a question is answerable only from
the right object's feature. The per-question-category answer priors are
engineered to differ between the train/val splits and the OOD test split:
a model that exploits the train priors instead of looking at the image does
well in-domain and collapses out-of-domain.

Generation is pure given (config, seed); every instance draws from its own
seed substream, so output is independent of generation order.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

# Category tokens grouped into loose semantic families; tokens in the same
# group get similar embeddings (see token_embedding), mimicking word-vector
# neighborhoods such as computer/laptop.
CATEGORY_GROUPS: dict[str, tuple[str, ...]] = {
    "animal": ("dog", "cat", "horse", "sheep"),
    "sport": ("ball", "frisbee", "kite", "skateboard"),
    "vehicle": ("car", "truck", "bus", "bike"),
    "household": ("cup", "chair", "book", "phone"),
}
CATEGORIES: tuple[str, ...] = tuple(t for g in CATEGORY_GROUPS.values() for t in g)
_TOKEN_GROUP: dict[str, str] = {t: g for g, ts in CATEGORY_GROUPS.items() for t in ts}

COLORS: tuple[str, ...] = ("red", "blue", "green", "yellow", "purple", "orange",
                           "black", "white", "pink", "brown", "gray", "cyan")
SIZES: tuple[str, ...] = ("small", "medium", "large")
COUNTS: tuple[str, ...] = ("0", "1", "2", "3")

ANSWER_VOCAB: tuple[str, ...] = ("yes", "no") + COUNTS + COLORS

# Question templates, one per question category. The placeholder is always a
# category token, so the noun lexicon is exactly the category list.
_TEMPLATES: dict[str, tuple[str, ...]] = {
    "yesno": ("is", "there", "a", "{}", "in", "the", "image"),
    "number": ("how", "many", "{}", "objects", "are", "there"),
    "other": ("what", "color", "is", "the", "{}"),
}
_FAMILY_SUPPORT: dict[str, tuple[str, ...]] = {
    "yesno": ("yes", "no"),
    "number": COUNTS,
    "other": COLORS,
}
FAMILIES: tuple[str, ...] = ("yesno", "number", "other")

NOUN_LEXICON: frozenset[str] = frozenset(CATEGORIES)

QUESTION_VOCAB: tuple[str, ...] = tuple(sorted(
    {w for t in _TEMPLATES.values() for w in t if w != "{}"} | set(CATEGORIES)
))

_EMBED_DIM = 32
_GROUP_MIX = 0.85  # same-group cosine ~= mix^2 ~= 0.72


def _hash_rng(*parts: str) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@lru_cache(maxsize=None)
def token_embedding(token: str) -> np.ndarray:
    """Deterministic unit embedding for a token, derived from the token string.

    Tokens in the same category group share a common direction, so their
    cosine similarity sits around 0.7; unrelated tokens sit near 0. Identical
    tokens have similarity exactly 1.
    """
    u = _hash_rng("token", token).normal(size=_EMBED_DIM)
    u /= np.linalg.norm(u)
    group = _TOKEN_GROUP.get(token)
    if group is not None:
        g = _hash_rng("group", group).normal(size=_EMBED_DIM)
        g /= np.linalg.norm(g)
        u = _GROUP_MIX * g + np.sqrt(1.0 - _GROUP_MIX ** 2) * u
        u /= np.linalg.norm(u)
    return u


class EmbeddingTable:
    """Cosine-similarity lookup between category tokens and question nouns."""

    def embed(self, token: str) -> np.ndarray:
        return token_embedding(token)

    def cosine(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        return float(np.dot(token_embedding(a), token_embedding(b)))


@dataclass
class ObjectDetection:
    id: int
    category: str
    attributes: list[str]
    feature: np.ndarray = field(repr=False)
    box: tuple[float, float, float, float]
    active: bool = True


@dataclass
class Scene:
    scene_id: str
    detections: list[ObjectDetection]

    def active_ids(self) -> list[int]:
        return [d.id for d in self.detections if d.active]

    def masked_copy(self, masked_ids: set[int]) -> "Scene":
        """Copy with the given detections deactivated; features untouched."""
        detections = [
            ObjectDetection(d.id, d.category, list(d.attributes), d.feature,
                            d.box, d.active and d.id not in masked_ids)
            for d in self.detections
        ]
        return Scene(self.scene_id, detections)


@dataclass
class QAInstance:
    qid: str
    scene_id: str
    question_tokens: list[str]
    question_category: str
    answers: list[str]
    nouns: list[str]
    gt_key_object_ids: list[int]


@dataclass
class DatasetSplit:
    name: str
    instances: list[tuple[Scene, QAInstance]]
    answer_vocab: tuple[str, ...]
    k_objects: int
    d_v: int

    def __len__(self) -> int:
        return len(self.instances)


@dataclass
class DataConfig:
    k_objects: int = 8
    d_v: int = 32
    n_train: int = 6000
    n_val: int = 1000
    n_test: int = 2000
    bias: float = 0.9
    annotator_noise: float = 0.1
    feature_noise: float = 0.1


def extract_nouns(question_tokens: list[str], lexicon: frozenset[str] | set[str]) -> list[str]:
    """Tokens flagged as nouns by the lexicon, order preserved, deduplicated."""
    seen: list[str] = []
    for tok in question_tokens:
        if tok in lexicon and tok not in seen:
            seen.append(tok)
    return seen


def soft_targets(answers: list[str], answer_vocab: tuple[str, ...] | list[str]) -> np.ndarray:
    """Per-answer supervision values min(1, count/3) from the 10 annotators."""
    index = {a: j for j, a in enumerate(answer_vocab)}
    y = np.zeros(len(answer_vocab))
    for ans in answers:
        if ans not in index:
            raise ValueError(f"answer token {ans!r} not in answer vocabulary")
        y[index[ans]] += 1.0
    return np.minimum(y / 3.0, 1.0)


def true_answer(scene: Scene, qa: QAInstance) -> str:
    """Reconstruct the scene-true answer from the generative rules."""
    noun = qa.nouns[0]
    matches = [d for d in scene.detections if d.category == noun]
    head = qa.question_tokens[0]
    if head == "is":
        return "yes" if matches else "no"
    if head == "how":
        return str(len(matches))
    if head == "what":
        if len(matches) != 1:
            raise ValueError(f"{qa.qid}: color question with {len(matches)} matching objects")
        return matches[0].attributes[0]
    raise ValueError(f"{qa.qid}: unrecognized question template {qa.question_tokens!r}")


class _FeatureSpace:
    """Per-benchmark-seed prototype vectors for categories and attributes."""

    def __init__(self, seed: int, d_v: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        self.d_v = d_v
        self.category = {c: rng.normal(size=d_v) for c in CATEGORIES}
        self.color = {c: rng.normal(size=d_v) for c in COLORS}
        self.size = {s: rng.normal(size=d_v) for s in SIZES}

    def feature(self, category: str, color: str, size: str,
                rng: np.random.Generator, noise: float) -> np.ndarray:
        base = self.category[category] + self.color[color] + self.size[size]
        return base + rng.normal(scale=noise, size=self.d_v)


def _inverted(prior: np.ndarray) -> np.ndarray:
    inv = 1.0 / prior
    return inv / inv.sum()


def _family_priors(seed: int, bias: float) -> dict[str, dict[str, np.ndarray]]:
    """Biased train prior and its inverse per question family."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    priors: dict[str, dict[str, np.ndarray]] = {}
    for fam in FAMILIES:
        support = _FAMILY_SUPPORT[fam]
        modal = int(rng.integers(len(support)))
        train = np.full(len(support), (1.0 - bias) / (len(support) - 1))
        train[modal] = bias
        priors[fam] = {"train": train, "ood": _inverted(train)}
    return priors


def _random_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    x1, x2 = np.sort(rng.uniform(size=2))
    y1, y2 = np.sort(rng.uniform(size=2))
    return (float(x1), float(y1), float(x2), float(y2))


def _build_instance(split: str, index: int, seed: int, split_tag: int,
                    config: DataConfig, space: _FeatureSpace,
                    priors: dict[str, dict[str, np.ndarray]], prior_key: str,
                    ) -> tuple[Scene, QAInstance]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, split_tag, index]))
    family = FAMILIES[int(rng.integers(len(FAMILIES)))]
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    support = _FAMILY_SUPPORT[family]
    answer = support[int(rng.choice(len(support), p=priors[family][prior_key]))]

    if family == "yesno":
        n_target = 1 if answer == "yes" else 0
    elif family == "number":
        n_target = int(answer)
    else:
        n_target = 1

    others = [c for c in CATEGORIES if c != category]
    specs: list[tuple[str, str, str]] = []
    for i in range(config.k_objects):
        if i < n_target:
            cat = category
            color = answer if family == "other" else COLORS[int(rng.integers(len(COLORS)))]
        else:
            cat = others[int(rng.integers(len(others)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
        size = SIZES[int(rng.integers(len(SIZES)))]
        specs.append((cat, color, size))
    rng.shuffle(specs)

    detections = [
        ObjectDetection(
            id=i, category=cat, attributes=[color, size],
            feature=space.feature(cat, color, size, rng, config.feature_noise),
            box=_random_box(rng),
        )
        for i, (cat, color, size) in enumerate(specs)
    ]
    scene = Scene(scene_id=f"{split}-s{index}", detections=detections)

    distractors = [a for a in support if a != answer]
    answers = [
        answer if rng.random() >= config.annotator_noise
        else distractors[int(rng.integers(len(distractors)))]
        for _ in range(10)
    ]

    tokens = [w.format(category) for w in _TEMPLATES[family]]
    nouns = extract_nouns(tokens, NOUN_LEXICON)
    gt_key = [d.id for d in detections if d.category in nouns]
    qa = QAInstance(
        qid=f"{split}-q{index}", scene_id=scene.scene_id,
        question_tokens=tokens, question_category=family,
        answers=answers, nouns=nouns, gt_key_object_ids=gt_key,
    )
    return scene, qa


def generate_benchmark(config: DataConfig, seed: int,
                       ) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Generate (train, val_indomain, test_ood) sharing one answer vocabulary."""
    if config.k_objects < 2:
        raise ValueError(f"k_objects must be >= 2, got {config.k_objects}")
    if not 0.0 < config.bias < 1.0:
        raise ValueError(f"bias must lie in (0, 1), got {config.bias}")
    if config.bias <= 0.5:
        warnings.warn(f"bias={config.bias} <= 0.5 gives no train/test prior shift",
                      stacklevel=2)
    space = _FeatureSpace(seed, config.d_v)
    priors = _family_priors(seed, config.bias)
    plan = [
        ("train", 2, config.n_train, "train"),
        ("val_indomain", 3, config.n_val, "train"),
        ("test_ood", 4, config.n_test, "ood"),
    ]
    splits = []
    for name, tag, count, prior_key in plan:
        instances = [
            _build_instance(name, i, seed, tag, config, space, priors, prior_key)
            for i in range(count)
        ]
        splits.append(DatasetSplit(name=name, instances=instances,
                                   answer_vocab=ANSWER_VOCAB,
                                   k_objects=config.k_objects, d_v=config.d_v))
    return tuple(splits)


# ---------------------------------------------------------------------------
# JSON-lines serialization


def _detection_record(d: ObjectDetection) -> dict:
    return {
        "id": d.id,
        "category": d.category,
        "attributes": list(d.attributes),
        "feature": [float(x) for x in d.feature],
        "box": list(d.box),
        "active": d.active,
    }


def write_split(path: str | Path, split: DatasetSplit) -> None:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "answer_vocab": list(split.answer_vocab),
        "K": split.k_objects,
        "d_v": split.d_v,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for scene, qa in split.instances:
            record = {
                "qid": qa.qid,
                "scene": {
                    "scene_id": scene.scene_id,
                    "detections": [_detection_record(d) for d in scene.detections],
                },
                "question_tokens": qa.question_tokens,
                "question_category": qa.question_category,
                "answers": qa.answers,
                "nouns": qa.nouns,
                "gt_key_object_ids": qa.gt_key_object_ids,
            }
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_split(path: str | Path, name: str | None = None) -> DatasetSplit:
    """Read a split written by :func:`write_split`.

    The split name defaults to the file stem. Malformed lines raise with the
    offending line number.
    """
    path = Path(path)
    instances: list[tuple[Scene, QAInstance]] = []
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}:1: missing header line")
    try:
        header = json.loads(lines[0])
        version = header["format_version"]
        answer_vocab = tuple(header["answer_vocab"])
        k_objects = int(header["K"])
        d_v = int(header["d_v"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}:1: malformed header: {exc}") from exc
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}:1: unsupported format_version {version}")
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            detections = [
                ObjectDetection(
                    id=int(d["id"]), category=d["category"],
                    attributes=list(d["attributes"]),
                    feature=np.asarray(d["feature"], dtype=np.float64),
                    box=tuple(d["box"]), active=bool(d["active"]),
                )
                for d in rec["scene"]["detections"]
            ]
            scene = Scene(scene_id=rec["scene"]["scene_id"], detections=detections)
            qa = QAInstance(
                qid=rec["qid"], scene_id=scene.scene_id,
                question_tokens=list(rec["question_tokens"]),
                question_category=rec["question_category"],
                answers=list(rec["answers"]),
                nouns=list(rec["nouns"]),
                gt_key_object_ids=[int(i) for i in rec["gt_key_object_ids"]],
            )
        except (json.JSONDecodeError, KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
        instances.append((scene, qa))
    return DatasetSplit(name=name or path.stem, instances=instances,
                        answer_vocab=answer_vocab, k_objects=k_objects, d_v=d_v)


def splits_equal(a: DatasetSplit, b: DatasetSplit) -> bool:
    """Structural equality, including exact feature values."""
    if (a.name, a.answer_vocab, a.k_objects, a.d_v) != (b.name, b.answer_vocab, b.k_objects, b.d_v):
        return False
    if len(a.instances) != len(b.instances):
        return False
    for (sa, qa), (sb, qb) in zip(a.instances, b.instances):
        if qa != qb or sa.scene_id != sb.scene_id:
            return False
        if len(sa.detections) != len(sb.detections):
            return False
        for da, db in zip(sa.detections, sb.detections):
            if (da.id, da.category, da.attributes, da.box, da.active) != \
               (db.id, db.category, db.attributes, db.box, db.active):
                return False
            if not np.array_equal(da.feature, db.feature):
                return False
    return True
