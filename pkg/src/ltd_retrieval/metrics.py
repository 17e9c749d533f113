"""Ranking and retrieval metrics (recall@k, r-precision).

Rankings sort candidates by descending cosine similarity; equal scores are
ordered by ascending candidate index.  A query counts as a hit at ``k`` when
its best-ranked relevant candidate is inside the top ``k``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyRelevance, NonUnitNorm, ShapeMismatch

RECALL_KS = (1, 5, 10)


def similarity_matrix(queries, candidates):
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    for name, m in (("queries", q), ("candidates", c)):
        if m.ndim != 2:
            raise ShapeMismatch(f"{name} must be 2-d")
        norms = np.sqrt(np.einsum("ij,ij->i", m, m))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise NonUnitNorm(f"{name} rows must be unit norm")
    if q.shape[1] != c.shape[1]:
        raise ShapeMismatch(f"dims differ: {q.shape[1]} vs {c.shape[1]}")
    return q @ c.T


def rank_candidates(queries, candidates):
    """(n_queries, n_candidates) candidate indices, best first."""
    sims = similarity_matrix(queries, candidates)
    return np.argsort(-sims, axis=1, kind="stable")


def _best_ranks(ranking, relevance):
    nq, nc = ranking.shape
    if len(relevance) != nq:
        raise ShapeMismatch(f"{len(relevance)} relevance sets for {nq} queries")
    position = np.empty_like(ranking)
    position[np.arange(nq)[:, None], ranking] = np.arange(nc)[None, :]
    best = np.empty(nq, dtype=np.int64)
    for i, rel in enumerate(relevance):
        rel = np.asarray(rel, dtype=np.int64)
        if rel.size == 0:
            raise EmptyRelevance(f"query {i} has no relevant candidates")
        best[i] = position[i, rel].min()
    return best, position


def recall_at_k(ranking, relevance, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    best, _ = _best_ranks(ranking, relevance)
    return float(np.mean(best < k))


def r_precision(ranking, relevance):
    _, position = _best_ranks(ranking, relevance)
    scores = []
    for i, rel in enumerate(relevance):
        rel = np.unique(np.asarray(rel, dtype=np.int64))
        r = rel.size
        scores.append(np.count_nonzero(position[i, rel] < r) / r)
    return math.fsum(scores) / len(scores)


@dataclass
class RetrievalScores:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    i2t_rprec: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    t2i_rprec: float

    @property
    def rsum(self):
        return (
            self.i2t_r1 + self.i2t_r5 + self.i2t_r10 + self.t2i_r1 + self.t2i_r5 + self.t2i_r10
        )

    def recalls(self):
        return {
            "i2t_r1": self.i2t_r1, "i2t_r5": self.i2t_r5, "i2t_r10": self.i2t_r10,
            "t2i_r1": self.t2i_r1, "t2i_r5": self.t2i_r5, "t2i_r10": self.t2i_r10,
        }

    def to_dict(self):
        return {**asdict(self), "rsum": self.rsum}


def score_retrieval(image_emb, caption_emb, relevance):
    i2t = rank_candidates(image_emb, caption_emb)
    t2i = rank_candidates(caption_emb, image_emb)
    vals = {}
    for prefix, ranking, rel in (("i2t", i2t, relevance.i2t), ("t2i", t2i, relevance.t2i)):
        for k in RECALL_KS:
            vals[f"{prefix}_r{k}"] = recall_at_k(ranking, rel, k)
        vals[f"{prefix}_rprec"] = r_precision(ranking, rel)
    return RetrievalScores(**vals)


@dataclass
class MetricsReport:
    single: RetrievalScores
    multi: RetrievalScores
    config_hash: str = ""
    seed: int = 0

    @property
    def rsum(self):
        return self.single.rsum

    def to_dict(self):
        return {
            "single": self.single.to_dict(),
            "multi": self.multi.to_dict(),
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d):
        def scores(s):
            return RetrievalScores(**{k: v for k, v in s.items() if k != "rsum"})

        return cls(scores(d["single"]), scores(d["multi"]), d.get("config_hash", ""), d.get("seed", 0))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
