"""Scalar training objectives with their gradients.

Every loss returns a :class:`LossOutput` carrying the value and the gradient
with respect to its first operand (``grad``) and, where the second operand
is trainable, with respect to it (``grad_other``).  Batch reduction is the
arithmetic mean over queries / rows / captions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import BatchTooSmall, LengthMismatch, NonUnitNorm, ShapeMismatch, ZeroNorm
from .linalg import NORM_EPS, log_softmax_rows, softmax_rows, stable_softmax
from .nn import TokenBatch, pad_tokens

DEFAULT_TAU = 0.05
DEFAULT_MARGIN = 0.2
UNIT_NORM_TOL = 1e-6


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    grad_other: Optional[np.ndarray] = None


class Objective(NamedTuple):
    """Combined scalar plus the weights applied to each gradient path."""

    value: float
    con_weight: float
    rec_weight: float


def _check_unit_rows(m, name):
    if m.ndim != 2 or m.shape[0] == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 2-d array")
    dev = np.abs(np.sqrt(np.einsum("ij,ij->i", m, m)) - 1.0)
    if np.any(dev > UNIT_NORM_TOL):
        raise NonUnitNorm(f"{name} row {int(np.argmax(dev))} deviates {dev.max():.2e} from unit norm")


def _check_pair(queries, candidates):
    queries = np.asarray(queries, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    _check_unit_rows(queries, "queries")
    _check_unit_rows(candidates, "candidates")
    if queries.shape[1] != candidates.shape[1]:
        raise ShapeMismatch(f"dims differ: {queries.shape} vs {candidates.shape}")
    return queries, candidates


def _positives(positives, n_queries, n_candidates):
    if positives is None:
        if n_queries != n_candidates:
            raise ShapeMismatch("positive indices required when batch sides differ")
        return np.arange(n_queries)
    pos = np.asarray(positives, dtype=np.int64)
    if pos.shape != (n_queries,) or pos.min() < 0 or pos.max() >= n_candidates:
        raise ShapeMismatch("invalid positive indices")
    return pos


def _infonce_one_way(q, c, pos, tau):
    logits = q @ c.T / tau
    logp = log_softmax_rows(logits)
    rows = np.arange(q.shape[0])
    value = 0.0 - logp[rows, pos].mean()
    dlogits = softmax_rows(logits)
    dlogits[rows, pos] -= 1.0
    dlogits /= q.shape[0] * tau
    return float(value), dlogits @ c, dlogits.T @ q


def infonce(queries, candidates, tau=DEFAULT_TAU, bidirectional=False, positives=None):
    """InfoNCE with in-batch negatives.

    Row ``i`` of ``queries`` is matched with row ``positives[i]`` of
    ``candidates`` (the diagonal by default); every other candidate is a
    negative.  With ``bidirectional`` the candidate->query loss is added
    and the two directions are averaged (requires a one-to-one pairing).
    """
    q, c = _check_pair(queries, candidates)
    pos = _positives(positives, q.shape[0], c.shape[0])
    value, gq, gc = _infonce_one_way(q, c, pos, tau)
    if not bidirectional:
        return LossOutput(value, gq, gc)
    if q.shape[0] != c.shape[0] or len(set(pos.tolist())) != len(pos):
        raise ShapeMismatch("bidirectional InfoNCE needs a one-to-one pairing")
    inverse = np.empty_like(pos)
    inverse[pos] = np.arange(len(pos))
    value_t, gc_t, gq_t = _infonce_one_way(c, q, inverse, tau)
    return LossOutput(0.5 * (value + value_t), 0.5 * (gq + gq_t), 0.5 * (gc + gc_t))


def infonce_grad_closed_form(queries, candidates, tau=DEFAULT_TAU, positives=None):
    """Per-query closed-form InfoNCE gradients, summed into batch gradients.

    For query ``q`` with positive ``v+`` and softmax weights ``Z``::

        dL/dq  = -[(1 - Z(q,v+)) v+ - sum_{v-} Z(q,v-) v-] / tau
        dL/dv+ = -(1 - Z(q,v+)) q / tau
        dL/dv- = +Z(q,v-) q / tau

    each scaled by ``1/B`` for the batch mean.  Written with explicit loops
    over queries and candidates; kept as an independent check on
    :func:`infonce`.
    """
    q, c = _check_pair(queries, candidates)
    pos = _positives(positives, q.shape[0], c.shape[0])
    B = q.shape[0]
    dq = np.zeros_like(q)
    dc = np.zeros_like(c)
    for i in range(B):
        z = stable_softmax([float(np.dot(q[i], c[j])) / tau for j in range(c.shape[0])])
        p = pos[i]
        pull = (1.0 - z[p]) * c[p] / tau
        push = np.zeros(q.shape[1])
        for j in range(c.shape[0]):
            if j == p:
                continue
            push += z[j] * c[j] / tau
            dc[j] += z[j] * q[i] / tau / B
        dq[i] = -(pull - push) / B
        dc[p] += -(1.0 - z[p]) * q[i] / tau / B
    return dq, dc


def _triplet_one_way(s, margin):
    B = s.shape[0]
    rows = np.arange(B)
    masked = s.copy()
    masked[rows, rows] = -np.inf
    hardest = np.argmax(masked, axis=1)  # first index on ties
    hinge = margin + s[rows, hardest] - s[rows, rows]
    active = hinge > 0
    ds = np.zeros_like(s)
    ds[rows[active], hardest[active]] += 1.0
    ds[rows[active], rows[active]] -= 1.0
    return float(np.where(active, hinge, 0.0).sum()), ds


def triplet_hardest(queries, candidates, margin=DEFAULT_MARGIN, bidirectional=True):
    """Hinge triplet loss against the hardest in-batch negative.

    Pairs are aligned on the diagonal.  Per-query hinges are summed over
    both retrieval directions and divided by the batch size.
    """
    q, c = _check_pair(queries, candidates)
    if q.shape[0] != c.shape[0]:
        raise ShapeMismatch("triplet loss needs aligned query/candidate rows")
    B = q.shape[0]
    if B < 2:
        raise BatchTooSmall("triplet loss needs at least one negative (B >= 2)")
    s = q @ c.T
    total, ds = _triplet_one_way(s, margin)
    if bidirectional:
        total_t, ds_t = _triplet_one_way(s.T, margin)
        total += total_t
        ds += ds_t.T
    ds /= B
    return LossOutput(total / B, ds @ c, ds.T @ q)


def cosine_reconstruction(pred, target):
    """Mean over rows of ``1 - cos(pred, target)``; the target is frozen."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeMismatch(f"shapes differ: {pred.shape} vs {target.shape}")
    pn = np.sqrt(np.einsum("ij,ij->i", pred, pred))
    tn = np.sqrt(np.einsum("ij,ij->i", target, target))
    if np.any(pn < NORM_EPS) or np.any(tn < NORM_EPS):
        raise ZeroNorm("cosine reconstruction needs nonzero rows")
    ph = pred / pn[:, None]
    th = target / tn[:, None]
    cos = np.einsum("ij,ij->i", ph, th)
    B = pred.shape[0]
    grad = -(th - ph * cos[:, None]) / pn[:, None] / B
    return LossOutput(float(np.mean(1.0 - cos)), grad)


@dataclass
class StepLogits:
    """Per-position vocabulary logits, right-padded: (B, T, V) plus mask."""

    values: np.ndarray
    mask: np.ndarray


def token_nll(logits, targets):
    """Per-caption summed token negative log-likelihood, averaged over captions."""
    if isinstance(logits, StepLogits):
        values, mask = logits.values, logits.mask
    else:
        seqs = [np.asarray(l, dtype=np.float64) for l in logits]
        T = max(s.shape[0] for s in seqs)
        V = seqs[0].shape[1]
        values = np.zeros((len(seqs), T, V))
        mask = np.zeros((len(seqs), T), dtype=bool)
        for i, s in enumerate(seqs):
            values[i, : s.shape[0]] = s
            mask[i, : s.shape[0]] = True
    tb = targets if isinstance(targets, TokenBatch) else pad_tokens(targets, values.shape[2])
    if tb.ids.shape[0] != values.shape[0] or not np.array_equal(
        tb.lengths, mask.sum(axis=1)
    ):
        raise LengthMismatch("logit and target lengths differ")
    B, T, V = values.shape
    tb_ids = np.zeros((B, T), dtype=np.int64)
    tb_ids[:, : tb.ids.shape[1]] = tb.ids
    flat = values.reshape(B * T, V)
    logp = log_softmax_rows(flat)
    idx = np.arange(B * T)
    m = mask.reshape(-1)
    value = -(logp[idx, tb_ids.reshape(-1)] * m).sum() / B
    grad = np.exp(logp)
    grad[idx, tb_ids.reshape(-1)] -= 1.0
    grad *= m[:, None] / B
    return LossOutput(float(value), grad.reshape(B, T, V))


def dual_objective(l_con, l_rec, beta=1.0):
    """``l_con + beta * l_rec``."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return Objective(l_con + beta * l_rec, 1.0, beta)
