import csv
import io
import json

import numpy as np
import pytest

from ltd_retrieval import ExperimentConfig, evaluate, run_fixed_target_mode, train
from ltd_retrieval.checkpoint import load_checkpoint, save_checkpoint
from ltd_retrieval.config import MODES
from ltd_retrieval.data import DatasetSpec, RelevanceAnnotations, generate_dataset
from ltd_retrieval.errors import ConfigInvalid, DimMismatch, NonFiniteLoss
from ltd_retrieval.metrics import score_retrieval

TINY = DatasetSpec(n_train=40, n_test=20, seed=1)
QUICK = dict(epochs=2, batch_size=16, hidden=16, d_joint=8, d_embed=8, ltd_hidden=16, d_dec=16, d_dec_embed=8)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(TINY)


def cfg(**kw):
    return ExperimentConfig(**{**QUICK, **kw})


def test_baseline_smoke_and_log_columns(tiny, tmp_path):
    art = train(cfg(epochs=1), *tiny, out_dir=tmp_path)
    rows = list(csv.DictReader(io.StringIO(art.step_log_csv())))
    assert list(rows[0]) == ["step", "epoch", "l_con", "l_rec", "lambda", "lr"]
    assert len(rows) == 200 // 16 + 1
    assert all(r["l_rec"] == "" and r["lambda"] == "" for r in rows)
    for name in ("checkpoint.bin", "swa_checkpoint.bin", "steps.csv", "config.json", "metrics.json"):
        assert (tmp_path / name).exists()
    assert json.loads((tmp_path / "config.json").read_text())["config_hash"] == art.config_hash


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_runs(tiny, mode):
    art = train(cfg(mode=mode), *tiny)
    assert art.metrics is not None
    assert 0.0 <= art.metrics.rsum <= 6.0
    lam = art.column("lambda")
    if mode.endswith("lagrange"):
        assert np.all((lam >= 0) & (lam <= 100))
    else:
        assert np.all(np.isnan(lam))


def test_triplet_variant_uses_batchnorm_without_swa(tiny):
    c = cfg(loss="triplet")
    assert c.batchnorm and not c.swa_enabled
    art = train(c, *tiny)
    assert art.swa_state is None
    assert any("bn." in k for k in art.state)


def test_determinism(tiny, tmp_path):
    a = train(cfg(mode="ltd_lagrange"), *tiny, out_dir=tmp_path / "a")
    b = train(cfg(mode="ltd_lagrange"), *tiny, out_dir=tmp_path / "b")
    assert a.metrics.to_json() == b.metrics.to_json()
    assert a.step_log_csv() == b.step_log_csv()
    for name in ("metrics.json", "steps.csv", "checkpoint.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_inactive_multiplier_reduces_to_contrastive_training(tiny):
    base = train(cfg(mode="baseline"), tiny[0])
    lag = train(cfg(mode="ltd_lagrange", lambda_init=0.0, eta=50.0), tiny[0])
    assert np.all(lag.column("lambda") == 0.0)
    for name, value in base.state.items():
        assert np.array_equal(value, lag.state[name]), name


def test_fixed_targets_freeze_caption_side(tiny):
    art = run_fixed_target_mode(cfg(mode="fixed_targets"), *tiny)
    assert not any(k.startswith(("caption", "target_head")) for k in art.state)
    with pytest.raises(ConfigInvalid):
        run_fixed_target_mode(cfg(mode="baseline"), *tiny)


def test_finetuned_head_lr_default_and_update(tiny):
    assert ExperimentConfig().head_lr == 2e-5
    art = run_fixed_target_mode(cfg(mode="finetuned_targets"), *tiny)
    assert any(k.startswith("target_head") for k in art.state)


def test_evaluate_checkpoint_twice_is_identical(tiny, tmp_path):
    art = train(cfg(), *tiny, out_dir=tmp_path)
    r1 = evaluate(tmp_path / "swa_checkpoint.bin", tiny[1], tiny[2], None)
    r2 = evaluate(tmp_path / "swa_checkpoint.bin", tiny[1], tiny[2], None)
    assert r1.to_json() == r2.to_json() == art.metrics.to_json()


def test_multi_positive_never_below_single(tiny):
    art = train(cfg(), *tiny)
    single, multi = art.metrics.single.recalls(), art.metrics.multi.recalls()
    for key in single:
        assert multi[key] >= single[key]


def test_separable_toy_scores_perfectly():
    targets = np.eye(6)
    rel = RelevanceAnnotations([np.array([i]) for i in range(6)], [np.array([i]) for i in range(6)])
    scores = score_retrieval(targets, targets, rel)
    assert scores.i2t_r1 == scores.t2i_r1 == 1.0


def test_dimension_mismatch_is_reported(tiny, tmp_path):
    train(cfg(), *tiny, out_dir=tmp_path)
    with pytest.raises(DimMismatch):
        evaluate(tmp_path / "checkpoint.bin", tiny[1], tiny[2], cfg(d_joint=12))


def test_divergence_aborts_with_state_dump(tmp_path):
    train_set = generate_dataset(TINY)[0]
    train_set.features[3, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as info:
        train(cfg(epochs=1), train_set, out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_state.json").read_text())
    assert dump["step"] == info.value.state["step"]


def test_config_validation_and_hash():
    with pytest.raises(ConfigInvalid):
        ExperimentConfig(mode="nope").validate()
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_dict({"epochs": 3, "unknown": 1})
    with pytest.raises(ConfigInvalid):
        ExperimentConfig(mode="finetuned_targets", loss="triplet").validate()
    assert ExperimentConfig(mode="ltd_dual").resolved_eta == 0.2
    assert ExperimentConfig(mode="itd_lagrange").resolved_eta == 6.0
    a, b = ExperimentConfig(), ExperimentConfig(epochs=21)
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == ExperimentConfig.from_dict(a.to_dict()).config_hash()


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    save_checkpoint(tmp_path / "c.bin", arrays, seed=4, config_hash="xyz", note="hi")
    back, header = load_checkpoint(tmp_path / "c.bin")
    assert header["config_hash"] == "xyz" and header["seed"] == 4
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
