"""Synthetic paired image/caption benchmark with a removable shortcut channel.

Each sample has a set of ``active`` semantic attributes drawn from
``n_attributes``.  Its image feature vector is::

    [A @ onehot(attributes) + noise,   shortcut block + noise]
     <---- d_img - d_shortcut ---->    <---- d_shortcut ---->

and each of its ``k`` captions lists ``tokens_per_caption`` distinct active
attributes (token id = attribute id) in random order, plus one shortcut
token (id ``>= n_attributes``) at a random position.

On the train split the shortcut block is a fixed random unit code per sample
id and every caption of that sample carries the shortcut token
``n_attributes + id``, so the pair identity is trivially readable from both
modalities.  On the test split the channel is broken (``shortcut_test``):

* ``"removed"``: block and caption shortcut tokens are drawn independently
  of the sample (tokens from the train shortcut pool);
* ``"unseen"``: each test sample gets a fresh, consistent code and token
  that never occurred during training.

Latent targets come from :class:`TargetGenerator` over the semantic tokens
of the caption only, so they never carry shortcut information.

File format (JSON Lines, schema version 1).  The first line is the metadata
record::

    {"record": "meta", "schema_version": 1, "split": "train"|"test",
     "n_records": N, "spec": {...DatasetSpec fields...}}

followed by ``N`` sample records::

    {"id": int, "image": [float x d_img], "attributes": [int x active],
     "captions": [[int x L] x k], "targets": [[float x d_target] x k]}

``annotations.json`` holds, per relevance mode (``"single"``, ``"multi"``),
the lists ``i2t`` (caption indices ``image * k + j`` relevant to each test
image) and ``t2i`` (image indices relevant to each test caption).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .decoders import TargetGenerator
from .errors import BatchTooSmall, ParseError, SchemaVersionMismatch, SpecInvalid
from .linalg import SeededRng

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class DatasetSpec:
    n_train: int = 2000
    n_test: int = 500
    k: int = 5
    n_attributes: int = 32
    active: int = 6
    tokens_per_caption: int = 3
    d_img: int = 48
    d_shortcut: int = 8
    d_target: int = 32
    shortcut_train: bool = True
    shortcut_test: str = "removed"
    overlap_threshold: int = 4
    semantic_noise: float = 0.5
    shortcut_scale: float = 1.0
    shortcut_noise: float = 0.05
    seed: int = 0
    target_seed: int = 42

    def validate(self):
        if not 1 <= self.tokens_per_caption <= self.active <= self.n_attributes:
            raise SpecInvalid("need 1 <= tokens_per_caption <= active <= n_attributes")
        if self.k < 1 or self.n_train < 1 or self.n_test < 1:
            raise SpecInvalid("k, n_train and n_test must be positive")
        if not 0 < self.d_shortcut < self.d_img:
            raise SpecInvalid("need 0 < d_shortcut < d_img")
        if self.shortcut_test not in ("removed", "unseen"):
            raise SpecInvalid(f"unknown shortcut_test mode {self.shortcut_test!r}")
        if not 1 <= self.overlap_threshold <= self.active:
            raise SpecInvalid("overlap_threshold must lie in [1, active]")
        return self

    @property
    def vocab_size(self):
        extra = self.n_test if self.shortcut_test == "unseen" else 0
        return self.n_attributes + self.n_train + extra

    @property
    def caption_length(self):
        return self.tokens_per_caption + (1 if self.shortcut_train else 0)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"comment"}
        if unknown:
            raise SpecInvalid(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known}).validate()


@dataclass
class Dataset:
    split: str
    spec: DatasetSpec
    ids: np.ndarray  # (N,)
    features: np.ndarray  # (N, d_img)
    attributes: np.ndarray  # (N, active)
    captions: np.ndarray  # (N, k, L) int
    targets: np.ndarray  # (N, k, d_target)

    def __len__(self):
        return len(self.ids)

    @property
    def n_captions(self):
        return self.captions.shape[0] * self.captions.shape[1]

    def flat_captions(self):
        """Captions as (N*k, L); caption ``i*k + j`` belongs to image ``i``."""
        return self.captions.reshape(-1, self.captions.shape[2])

    def flat_targets(self):
        return self.targets.reshape(-1, self.targets.shape[2])

    def equals(self, other):
        return (
            self.split == other.split
            and asdict(self.spec) == asdict(other.spec)
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("ids", "features", "attributes", "captions", "targets")
            )
        )


@dataclass
class RelevanceAnnotations:
    """Relevant candidate indices per query in both directions."""

    i2t: list
    t2i: list
    mode: str = "multi"


@dataclass
class PairedBatch:
    image_index: np.ndarray
    caption_index: np.ndarray
    features: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    duplicates: int = field(default=0)

    def __len__(self):
        return len(self.image_index)


def semantic_tokens(caption, n_attributes):
    return [int(t) for t in caption if t < n_attributes]


def _make_split(spec, split, n, rng, codes, sem_map, generator):
    n_sem = spec.d_img - spec.d_shortcut
    ids = np.arange(n, dtype=np.int64)
    attributes = np.stack(
        [np.sort(rng.choice(spec.n_attributes, spec.active)) for _ in range(n)]
    )
    onehot = np.zeros((n, spec.n_attributes))
    np.put_along_axis(onehot, attributes, 1.0, axis=1)
    sem = onehot @ sem_map.T + rng.normal(0.0, spec.semantic_noise, size=(n, n_sem))

    if split == "train" and spec.shortcut_train:
        block_codes = codes[ids]
        token_of = spec.n_attributes + ids
    elif split == "test" and spec.shortcut_test == "unseen":
        block_codes = rng.unit_vectors(n, spec.d_shortcut)
        token_of = spec.n_attributes + spec.n_train + ids
    else:
        block_codes = rng.unit_vectors(n, spec.d_shortcut)
        token_of = None
    block = spec.shortcut_scale * block_codes + rng.normal(
        0.0, spec.shortcut_noise, size=(n, spec.d_shortcut)
    )
    features = np.concatenate([sem, block], axis=1)

    L = spec.caption_length
    captions = np.zeros((n, spec.k, L), dtype=np.int64)
    targets = np.zeros((n, spec.k, spec.d_target))
    for i in range(n):
        for j in range(spec.k):
            chosen = rng.choice(attributes[i], spec.tokens_per_caption)
            toks = [int(t) for t in chosen]
            targets[i, j] = generator.generate(toks)
            if spec.shortcut_train:
                if token_of is not None:
                    shortcut = int(token_of[i])
                else:
                    shortcut = spec.n_attributes + int(rng.integers(spec.n_train))
                toks.insert(int(rng.integers(L)), shortcut)
            captions[i, j] = toks
    return Dataset(split, spec, ids, features, attributes, captions, targets)


def build_annotations(dataset, threshold=None):
    """Single-positive and overlap-based multi-positive relevance sets."""
    spec = dataset.spec
    threshold = spec.overlap_threshold if threshold is None else threshold
    n, k = len(dataset), spec.k
    onehot = np.zeros((n, spec.n_attributes), dtype=np.int64)
    np.put_along_axis(onehot, dataset.attributes, 1, axis=1)
    overlap = onehot @ onehot.T
    related = overlap >= threshold
    np.fill_diagonal(related, True)

    def caption_sets(image_sets):
        return [np.concatenate([np.arange(i * k, i * k + k) for i in s]) for s in image_sets]

    single_images = [np.array([i]) for i in range(n)]
    multi_images = [np.flatnonzero(related[i]) for i in range(n)]
    single = RelevanceAnnotations(
        caption_sets(single_images), [np.array([c // k]) for c in range(n * k)], "single"
    )
    multi = RelevanceAnnotations(
        caption_sets(multi_images), [multi_images[c // k] for c in range(n * k)], "multi"
    )
    return {"single": single, "multi": multi, "threshold": threshold}


def generate_dataset(spec):
    """Returns ``(train, test, annotations)``; annotations cover the test split."""
    if not isinstance(spec, DatasetSpec):
        raise SpecInvalid("generate_dataset expects a DatasetSpec")
    spec.validate()
    rng = SeededRng(spec.seed)
    n_sem = spec.d_img - spec.d_shortcut
    sem_map = rng.fork(1).normal(0.0, 1.0 / np.sqrt(spec.active), size=(n_sem, spec.n_attributes))
    codes = rng.fork(2).unit_vectors(spec.n_train, spec.d_shortcut)
    generator = TargetGenerator(spec.n_attributes, spec.d_target, spec.target_seed)
    train = _make_split(spec, "train", spec.n_train, rng.fork(3), codes, sem_map, generator)
    test = _make_split(spec, "test", spec.n_test, rng.fork(4), codes, sem_map, generator)
    return train, test, build_annotations(test)


def shortcut_probe_accuracy(dataset):
    """Pair identification from the image shortcut block alone.

    A nearest-prototype linear probe: one weight vector per caption shortcut
    token (the normalized mean block of the images carrying it), scored by
    dot product.  Returns the fraction of images whose own token wins.
    """
    spec = dataset.spec
    if not spec.shortcut_train:
        return 0.0
    blocks = dataset.features[:, spec.d_img - spec.d_shortcut :]
    first_caption = dataset.captions[:, 0, :]
    tokens = first_caption[first_caption >= spec.n_attributes].reshape(len(dataset))
    classes, inverse = np.unique(tokens, return_inverse=True)
    protos = np.zeros((len(classes), spec.d_shortcut))
    np.add.at(protos, inverse, blocks)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    predicted = np.argmax(blocks @ protos.T, axis=1)
    return float(np.mean(predicted == inverse))


def epoch_batches(dataset, batch_size, epoch_seed):
    """Every (image, caption) pair exactly once, shuffled, in chunks.

    The last batch may be short.  Pairs of the same image can land in one
    batch; they then act as negatives for each other.
    """
    if batch_size < 2:
        raise BatchTooSmall("batch_size must be at least 2")
    n, k = len(dataset), dataset.spec.k
    order = SeededRng(epoch_seed).permutation(n * k)
    batches = []
    for start in range(0, n * k, batch_size):
        chunk = order[start : start + batch_size]
        img, cap = chunk // k, chunk % k
        dup = len(img) - len(np.unique(img))
        if dup:
            log.debug("batch at %d holds %d repeated images", start, dup)
        batches.append(
            PairedBatch(
                img,
                cap,
                dataset.features[img],
                dataset.captions[img, cap],
                dataset.targets[img, cap],
                dup,
            )
        )
    return batches


def save_dataset(dataset, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        meta = {
            "record": "meta",
            "schema_version": SCHEMA_VERSION,
            "split": dataset.split,
            "n_records": len(dataset),
            "spec": asdict(dataset.spec),
        }
        fh.write(json.dumps(meta) + "\n")
        for i in range(len(dataset)):
            rec = {
                "id": int(dataset.ids[i]),
                "image": dataset.features[i].tolist(),
                "attributes": dataset.attributes[i].tolist(),
                "captions": dataset.captions[i].tolist(),
                "targets": dataset.targets[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    return path


_RECORD_KEYS = ("id", "image", "attributes", "captions", "targets")


def load_dataset(path):
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not any(l.strip() for l in lines):
        raise ParseError("no records")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad metadata record ({exc.msg})", line=1) from exc
    if not isinstance(meta, dict) or meta.get("record") != "meta":
        raise ParseError("first record must be the metadata record", line=1)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"file schema {meta.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    try:
        spec = DatasetSpec.from_dict(meta["spec"])
        expected = int(meta["n_records"])
        split = meta["split"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"incomplete metadata record ({exc})", line=1) from exc
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed record ({exc.msg})", line=lineno) from exc
        if not isinstance(rec, dict) or any(key not in rec for key in _RECORD_KEYS):
            raise ParseError("record is missing fields", line=lineno)
        records.append(rec)
    if len(records) != expected:
        raise ParseError(f"truncated file: expected {expected} records, found {len(records)}")
    if expected == 0:
        raise ParseError("no records")
    try:
        ds = Dataset(
            split,
            spec,
            np.array([r["id"] for r in records], dtype=np.int64),
            np.array([r["image"] for r in records], dtype=np.float64),
            np.array([r["attributes"] for r in records], dtype=np.int64),
            np.array([r["captions"] for r in records], dtype=np.int64),
            np.array([r["targets"] for r in records], dtype=np.float64),
        )
    except ValueError as exc:
        raise ParseError(f"ragged or malformed arrays ({exc})") from exc
    if ds.features.shape != (expected, spec.d_img) or ds.captions.shape[:2] != (expected, spec.k):
        raise ParseError("record shapes do not match the metadata spec")
    return ds


def save_annotations(annotations, path):
    out = {"schema_version": SCHEMA_VERSION, "threshold": annotations["threshold"]}
    for mode in ("single", "multi"):
        rel = annotations[mode]
        out[mode] = {"i2t": [a.tolist() for a in rel.i2t], "t2i": [a.tolist() for a in rel.t2i]}
    Path(path).write_text(json.dumps(out), encoding="utf-8")
    return path


def load_annotations(path):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from exc
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"annotation schema {raw.get('schema_version')}")
    out = {"threshold": raw["threshold"]}
    for mode in ("single", "multi"):
        out[mode] = RelevanceAnnotations(
            [np.array(a, dtype=np.int64) for a in raw[mode]["i2t"]],
            [np.array(a, dtype=np.int64) for a in raw[mode]["t2i"]],
            mode,
        )
    return out


def write_dataset_dir(spec, out_dir):
    """Generate and write ``train.jsonl``, ``test.jsonl``, ``annotations.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, ann = generate_dataset(spec)
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    save_annotations(ann, out / "annotations.json")
    return train, test, ann


def read_dataset_dir(data_dir):
    d = Path(data_dir)
    return (
        load_dataset(d / "train.jsonl"),
        load_dataset(d / "test.jsonl"),
        load_annotations(d / "annotations.json"),
    )
