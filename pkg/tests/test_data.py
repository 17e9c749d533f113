import json

import numpy as np
import pytest

from ltd_retrieval.data import (
    DatasetSpec,
    build_annotations,
    epoch_batches,
    generate_dataset,
    load_annotations,
    load_dataset,
    save_annotations,
    save_dataset,
    semantic_tokens,
    shortcut_probe_accuracy,
    write_dataset_dir,
)
from ltd_retrieval.decoders import TargetGenerator
from ltd_retrieval.errors import BatchTooSmall, ParseError, SchemaVersionMismatch, SpecInvalid
from ltd_retrieval.linalg import SeededRng

SMALL = DatasetSpec(n_train=100, n_test=40, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SMALL)


def test_counts(small):
    train, test, _ = small
    assert len(train) == 100
    assert train.n_captions == 500
    assert train.flat_targets().shape == (500, SMALL.d_target)
    assert len(test) == 40


def test_train_captions_share_a_unique_shortcut_token(small):
    train, _, _ = small
    spec = train.spec
    tokens = []
    for i in range(len(train)):
        shortcut = {int(t) for t in train.captions[i].ravel() if t >= spec.n_attributes}
        assert len(shortcut) == 1
        tokens.append(shortcut.pop())
    assert len(set(tokens)) == len(train)


def test_captions_use_active_attributes_only(small):
    train, test, _ = small
    for ds in (train, test):
        for i in range(len(ds)):
            for cap in ds.captions[i]:
                sem = semantic_tokens(cap, ds.spec.n_attributes)
                assert len(sem) == ds.spec.tokens_per_caption == len(set(sem))
                assert set(sem) <= set(ds.attributes[i].tolist())


def test_test_split_shortcut_is_independent_of_id(small):
    train, test, _ = small
    spec = test.spec
    toks = [int(t) for t in test.captions[:, :, :].ravel() if t >= spec.n_attributes]
    per_image = [
        {int(t) for t in test.captions[i].ravel() if t >= spec.n_attributes} for i in range(len(test))
    ]
    assert sum(len(s) > 1 for s in per_image) > len(test) // 2
    assert max(toks) < spec.n_attributes + spec.n_train


def test_generation_is_bit_identical(tmp_path):
    a = write_dataset_dir(SMALL, tmp_path / "a")
    b = write_dataset_dir(SMALL, tmp_path / "b")
    for name in ("train.jsonl", "test.jsonl", "annotations.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a[0].equals(b[0])


def test_roundtrip(tmp_path, small):
    train, test, ann = small
    save_dataset(train, tmp_path / "t.jsonl")
    assert load_dataset(tmp_path / "t.jsonl").equals(train)
    save_annotations(ann, tmp_path / "a.json")
    back = load_annotations(tmp_path / "a.json")
    for mode in ("single", "multi"):
        for x, y in zip(back[mode].i2t, ann[mode].i2t):
            assert np.array_equal(x, y)


def test_parse_errors(tmp_path, small):
    train = small[0]
    p = tmp_path / "d.jsonl"
    save_dataset(train, p)
    lines = p.read_text().splitlines()
    (tmp_path / "trunc.jsonl").write_text("\n".join(lines[:10]) + "\n")
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "trunc.jsonl")
    (tmp_path / "cut.jsonl").write_text("\n".join(lines[:5]) + "\n" + lines[5][:40])
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path / "cut.jsonl")
    assert info.value.line == 6
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ParseError, match="no records"):
        load_dataset(tmp_path / "empty.jsonl")
    meta = json.loads(lines[0])
    meta["schema_version"] = 99
    (tmp_path / "v.jsonl").write_text("\n".join([json.dumps(meta)] + lines[1:]))
    with pytest.raises(SchemaVersionMismatch):
        load_dataset(tmp_path / "v.jsonl")


def test_spec_validation():
    with pytest.raises(SpecInvalid):
        DatasetSpec(tokens_per_caption=7, active=6).validate()
    with pytest.raises(SpecInvalid):
        DatasetSpec(k=0).validate()
    with pytest.raises(SpecInvalid):
        DatasetSpec.from_dict({"n_train": 5, "bogus": 1})
    assert DatasetSpec.from_dict({"n_train": 5, "comment": "x"}).n_train == 5


def test_epoch_batches_cover_every_pair():
    train, _, _ = generate_dataset(DatasetSpec(n_train=4, n_test=4, seed=1))
    batches = epoch_batches(train, 10, epoch_seed=5)
    assert [len(b) for b in batches] == [10, 10]
    pairs = {(int(i), int(c)) for b in batches for i, c in zip(b.image_index, b.caption_index)}
    assert pairs == {(i, j) for i in range(4) for j in range(5)}
    again = epoch_batches(train, 10, epoch_seed=5)
    assert all(np.array_equal(a.image_index, b.image_index) for a, b in zip(batches, again))
    short = epoch_batches(train, 6, epoch_seed=5)
    assert [len(b) for b in short] == [6, 6, 6, 2]
    with pytest.raises(BatchTooSmall):
        epoch_batches(train, 1, 0)


def test_batch_rows_match_dataset(small):
    train = small[0]
    b = epoch_batches(train, 32, 0)[0]
    assert np.array_equal(b.tokens, train.captions[b.image_index, b.caption_index])
    assert np.array_equal(b.features, train.features[b.image_index])


def test_shortcut_probe_identifies_train_pairs(small):
    assert shortcut_probe_accuracy(small[0]) >= 0.99
    assert shortcut_probe_accuracy(generate_dataset(DatasetSpec())[0]) >= 0.99


def test_targets_ignore_shortcut_tokens(small):
    train = small[0]
    spec = train.spec
    gen = TargetGenerator(spec.n_attributes, spec.d_target, spec.target_seed)
    rng = SeededRng(0)
    shuffled = train.captions.copy()
    mask = shuffled >= spec.n_attributes
    shuffled[mask] = spec.n_attributes + rng.permutation(mask.sum()) % spec.n_train
    regen = np.array([[gen.generate(semantic_tokens(c, spec.n_attributes)) for c in caps] for caps in shuffled])
    assert np.array_equal(regen, train.targets)


def test_annotations_symmetric_and_contain_pair(small):
    _, test, ann = small
    k = test.spec.k
    multi = ann["multi"]
    related = [set(int(c) // k for c in s) for s in multi.i2t]
    for i, rel in enumerate(related):
        assert i in rel
        for j in rel:
            assert i in related[j]
    for c, imgs in enumerate(multi.t2i):
        assert c // k in set(imgs.tolist())
    assert all(len(s) == 1 for s in ann["single"].t2i)
    loose = build_annotations(test, threshold=1)
    assert sum(map(len, loose["multi"].i2t)) >= sum(map(len, multi.i2t))


def test_unseen_mode_uses_fresh_tokens():
    spec = DatasetSpec(n_train=20, n_test=10, shortcut_test="unseen")
    train, test, _ = generate_dataset(spec)
    toks = {int(t) for t in test.captions.ravel() if t >= spec.n_attributes}
    assert min(toks) >= spec.n_attributes + spec.n_train
    assert spec.vocab_size == spec.n_attributes + 30
