"""Training loop, evaluation and run artifacts for every experiment mode.

Per step: encode both modalities, compute the contrastive loss and (for
decoder modes) the reconstruction loss, combine them per mode, backpropagate,
take one SGD step at the cosine-scheduled learning rate, and finally (for
``*_lagrange`` modes) one ascent step on the multiplier using the same
step's reconstruction loss.

Descent is plain SGD; the Lagrange multiplier uses the ascent rule in
:mod:`ltd_retrieval.constraint`.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .constraint import (
    LagrangeState,
    SwaAccumulator,
    cosine_lr,
    lagrangian_objective,
    sgd_step,
    swa_schedule,
    update_lambda,
)
from .data import epoch_batches
from .decoders import InputTokenDecoder, LatentTargetDecoder
from .encoders import CaptionEncoder, ImageEncoder
from .errors import ConfigInvalid, DimMismatch, NonFinite, NonFiniteLoss, NonUnitNorm, ZeroNorm
from .linalg import SeededRng, l2_normalize_rows
from .losses import (
    UNIT_NORM_TOL,
    Objective,
    cosine_reconstruction,
    dual_objective,
    infonce,
    token_nll,
    triplet_hardest,
)
from .metrics import MetricsReport, score_retrieval
from .nn import ParameterStore, ProjectionHead

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "l_con", "l_rec", "lambda", "lr")


class RetrievalModel:
    """All trainable (and frozen) pieces a configuration needs."""

    def __init__(self, config, spec):
        self.config = config
        self.spec = spec
        rng = SeededRng(config.model_seed)
        bn = config.batchnorm
        self.image = ImageEncoder(spec.d_img, config.hidden, config.d_joint, rng.fork(1), batchnorm=bn)
        self.caption = None
        self.target_head = None
        self.target_projection = None
        self.decoder = None
        if config.mode == "fixed_targets":
            proj = rng.fork(5).normal(size=(config.d_joint, spec.d_target))
            self.target_projection = proj / np.sqrt(spec.d_target)
        elif config.mode == "finetuned_targets":
            self.target_head = ProjectionHead(
                spec.d_target, config.hidden, config.d_joint, rng.fork(6)
            )
        else:
            self.caption = CaptionEncoder(
                spec.vocab_size, config.d_embed, config.hidden, config.d_joint, rng.fork(2),
                pooling=config.caption_pooling, batchnorm=bn,
            )
        if config.decoder == "ltd":
            self.decoder = LatentTargetDecoder(config.d_joint, config.ltd_hidden, spec.d_target, rng.fork(3))
        elif config.decoder == "itd":
            self.decoder = InputTokenDecoder(
                spec.vocab_size, config.d_joint, config.d_dec, config.d_dec_embed, rng.fork(4)
            )

    def modules(self):
        mods = {"image": self.image}
        for name in ("caption", "target_head", "decoder"):
            if getattr(self, name) is not None:
                mods[name] = getattr(self, name)
        return mods

    def train(self, mode=True):
        for m in self.modules().values():
            m.train(mode)

    def encode_captions(self, tokens, targets):
        """Caption-side embeddings for the configured mode."""
        if self.caption is not None:
            return self.caption.forward(tokens)
        if self.target_head is not None:
            return self.target_head.forward(targets)
        return l2_normalize_rows(targets @ self.target_projection.T)[0]

    def backward_captions(self, grad):
        if self.caption is not None:
            self.caption.backward(grad)
        elif self.target_head is not None:
            self.target_head.backward(grad)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    config_hash: str
    state: dict
    swa_state: dict | None
    step_log: list
    lambda_trace: list = field(default_factory=list)
    metrics: MetricsReport | None = None
    out_dir: Path | None = None
    skipped_batches: int = 0

    @property
    def eval_state(self):
        return self.swa_state if self.swa_state is not None else self.state

    def step_log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.step_log:
            w.writerow(["" if row[c] is None else repr(row[c]) for c in LOG_COLUMNS])
        return buf.getvalue()

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.step_log])


def _epoch_seed(config, epoch):
    return config.epoch_seed * 1_000_003 + epoch


def _check_dims(config, spec):
    if config.decoder == "itd" and not spec.shortcut_train and spec.caption_length < 1:
        raise DimMismatch("ITD needs non-empty captions")


def train(config, train_set, test_set=None, annotations=None, out_dir=None):
    """Train one configuration; optionally evaluate and write artifacts."""
    config = config.validate()
    spec = train_set.spec
    _check_dims(config, spec)
    model = RetrievalModel(config, spec)
    model.train(True)
    modules = model.modules()
    head_store = None
    if config.mode == "finetuned_targets":
        head_store = ParameterStore({"target_head": modules.pop("target_head")})
    store = ParameterStore(modules)

    n_pairs = len(train_set) * spec.k
    steps_per_epoch = math.ceil(n_pairs / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    swa_points = set(swa_schedule(steps_per_epoch, config.swa_checkpoints, config.swa_fraction))
    swa = SwaAccumulator() if config.swa_enabled else None

    lagrange = None
    if config.combiner == "lagrange":
        lagrange = LagrangeState(
            lam=config.lambda_init, eta=config.resolved_eta, lr=config.lambda_lr,
            momentum=config.lambda_momentum, dampening=config.lambda_dampening,
            lam_min=config.lambda_min, lam_max=config.lambda_max,
        )

    step_log = []
    lambda_trace = []
    skipped = 0
    step = 0
    for epoch in range(config.epochs):
        if swa is not None and config.swa_mode == "per_epoch":
            swa.reset()
        for index, batch in enumerate(epoch_batches(train_set, config.batch_size, _epoch_seed(config, epoch))):
            if len(batch) < 2:
                skipped += 1
                log.warning("skipping batch of size %d at step %d", len(batch), step)
                continue
            lr = cosine_lr(step, total_steps, config.base_lr)
            try:
                l_con, l_rec = _train_step(model, config, batch, lagrange, store, head_store, lr)
            except _Diverged as exc:
                state = {"step": step, "epoch": epoch, "lambda": None if lagrange is None else lagrange.lam,
                         "lr": lr, "where": str(exc), **exc.values}
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    (Path(out_dir) / "nonfinite_state.json").write_text(json.dumps(state, default=str))
                raise NonFiniteLoss(f"non-finite {exc} at step {step}", state) from None
            if lagrange is not None:
                lagrange = update_lambda(lagrange, l_rec)
                assert lagrange.lam_min <= lagrange.lam <= lagrange.lam_max
                lambda_trace.append(lagrange.lam)
            step_log.append({
                "step": step, "epoch": epoch, "l_con": l_con, "l_rec": l_rec,
                "lambda": None if lagrange is None else lagrange.lam, "lr": lr,
            })
            if swa is not None and index in swa_points:
                swa.update(_full_state(store, head_store))
            step += 1

    artifacts = RunArtifacts(
        config=config,
        config_hash=config.config_hash(),
        state=_full_state(store, head_store),
        swa_state=swa.finalize() if swa is not None and swa.count else None,
        step_log=step_log,
        lambda_trace=lambda_trace,
        skipped_batches=skipped,
    )
    if test_set is not None and annotations is not None:
        artifacts.metrics = evaluate(artifacts.eval_state, test_set, annotations, config)
    if out_dir is not None:
        write_artifacts(artifacts, out_dir, spec)
    return artifacts


def _full_state(store, head_store):
    state = store.state_dict()
    if head_store is not None:
        state.update(head_store.state_dict())
    return state


def _contrastive(config, z_img, z_cap):
    if config.mode == "fixed_targets":
        return cosine_reconstruction(z_img, z_cap)
    if config.loss == "triplet":
        return triplet_hardest(z_img, z_cap, config.margin)
    return infonce(z_img, z_cap, config.tau, bidirectional=True)


def _objective(config, l_con, l_rec, lagrange):
    if l_rec is None:
        return Objective(l_con, 1.0, 0.0)
    if config.combiner == "dual":
        return dual_objective(l_con, l_rec, config.beta)
    return lagrangian_objective(l_con, l_rec, lagrange)


class _Diverged(Exception):
    def __init__(self, where, **values):
        super().__init__(where)
        self.values = values


def _on_sphere(z):
    # Overflowing parameters show up as zero rows after normalization.
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    return bool(np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL))


def _train_step(model, config, batch, lagrange, store, head_store, lr):
    """One descent step; raises ``_Diverged`` before touching any parameter."""
    try:
        z_img = model.image.forward(batch.features)
        z_cap = model.encode_captions(batch.tokens, batch.targets)
    except (ZeroNorm, NonFinite, NonUnitNorm) as exc:
        raise _Diverged(f"forward pass ({exc})") from exc
    if not (_on_sphere(z_img) and _on_sphere(z_cap)):
        raise _Diverged("embeddings")
    con = _contrastive(config, z_img, z_cap)

    rec = None
    if config.decoder == "ltd":
        rec = cosine_reconstruction(model.decoder.forward(z_cap), batch.targets)
    elif config.decoder == "itd":
        rec = token_nll(model.decoder.forward(z_cap, batch.tokens), batch.tokens)
    l_rec = None if rec is None else rec.value
    if not (math.isfinite(con.value) and (l_rec is None or math.isfinite(l_rec))):
        raise _Diverged("loss", l_con=con.value, l_rec=l_rec)
    obj = _objective(config, con.value, l_rec, lagrange)
    if lagrange is not None and lagrange.lam == 0.0:
        assert obj.rec_weight == 0.0  # inactive multiplier: pure contrastive descent

    d_img = obj.con_weight * con.grad
    model.image.backward(d_img)
    if config.mode != "fixed_targets":
        d_cap = obj.con_weight * con.grad_other
        if rec is not None:
            d_cap = d_cap + model.decoder.backward(obj.rec_weight * rec.grad)
        model.backward_captions(d_cap)
    sgd_step(store, lr)
    if head_store is not None:
        sgd_step(head_store, config.head_lr)
    return con.value, l_rec


def encode_split(model, dataset):
    model.train(False)
    z_img = model.image.forward(dataset.features)
    z_cap = model.encode_captions(dataset.flat_captions(), dataset.flat_targets())
    # Eval forward passes leave caches behind; drop them.
    for m in model.modules().values():
        m.clear_cache()
    return z_img, z_cap


def evaluate(state, dataset, annotations, config):
    """Encode the split and score it; decoders are never run.

    ``state`` is a parameter mapping or a checkpoint path.
    """
    if isinstance(state, (str, Path)):
        state, header = load_checkpoint(state)
        if config is None:
            config = ExperimentConfig.from_dict(header["config"])
    model = RetrievalModel(config, dataset.spec)
    mods = model.modules()
    mods.pop("decoder", None)
    try:
        ParameterStore(mods).load_state_dict(state)
    except KeyError as exc:
        raise DimMismatch(f"checkpoint lacks parameter {exc}") from exc
    except ValueError as exc:
        raise DimMismatch(str(exc)) from exc
    z_img, z_cap = encode_split(model, dataset)
    return MetricsReport(
        single=score_retrieval(z_img, z_cap, annotations["single"]),
        multi=score_retrieval(z_img, z_cap, annotations["multi"]),
        config_hash=config.config_hash(),
        seed=config.model_seed,
    )


def run_fixed_target_mode(config, train_set, test_set=None, annotations=None, out_dir=None):
    if config.mode not in ("fixed_targets", "finetuned_targets"):
        raise ConfigInvalid("run_fixed_target_mode needs a fixed/finetuned target mode")
    return train(config, train_set, test_set, annotations, out_dir)


def write_artifacts(artifacts, out_dir, spec):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = artifacts.config
    meta = dict(config=cfg.to_dict(), dataset_spec=asdict(spec), descent="sgd")
    save_checkpoint(out / "checkpoint.bin", artifacts.state, cfg.model_seed, artifacts.config_hash,
                    kind="final", **meta)
    if artifacts.swa_state is not None:
        save_checkpoint(out / "swa_checkpoint.bin", artifacts.swa_state, cfg.model_seed,
                        artifacts.config_hash, kind="swa", **meta)
    (out / "steps.csv").write_text(artifacts.step_log_csv(), encoding="utf-8")
    (out / "config.json").write_text(
        json.dumps({**cfg.to_dict(), "config_hash": artifacts.config_hash}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    if artifacts.metrics is not None:
        artifacts.metrics.save(out / "metrics.json")
    artifacts.out_dir = out
    return out
