"""Image and caption encoders mapping both modalities onto the unit sphere."""
from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .nn import GRU, Embedding, EmbeddingMeanPool, Linear, Module, ProjectionHead, ReLU, pad_tokens


class ImageEncoder(Module):
    """Linear + ReLU backbone followed by a projection head."""

    def __init__(self, d_img, hidden, d_joint, rng, batchnorm=False):
        self.d_img, self.d_joint = d_img, d_joint
        self.backbone = Linear(d_img, hidden, rng.fork(1))
        self.act = ReLU()
        self.head = ProjectionHead(hidden, hidden, d_joint, rng.fork(2), batchnorm=batchnorm)

    def forward(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.d_img:
            raise ShapeMismatch(f"expected (*, {self.d_img}) image features, got {features.shape}")
        return self.head.forward(self.act.forward(self.backbone.forward(features)))

    def backward(self, upstream):
        return self.backbone.backward(self.act.backward(self.head.backward(upstream)))

    encode = forward


class CaptionEncoder(Module):
    """Token embeddings, mean (default) or GRU pooling, projection head."""

    def __init__(self, vocab_size, d_embed, hidden, d_joint, rng, pooling="mean", batchnorm=False):
        if pooling not in ("mean", "gru"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.vocab_size, self.d_joint, self.pooling = vocab_size, d_joint, pooling
        if pooling == "mean":
            self.pool = EmbeddingMeanPool(vocab_size, d_embed, rng.fork(1))
        else:
            self.embed = Embedding(vocab_size, d_embed, rng.fork(1))
            self.gru = GRU(d_embed, hidden, rng.fork(3))
        pooled_dim = d_embed if pooling == "mean" else hidden
        self.head = ProjectionHead(pooled_dim, hidden, d_joint, rng.fork(2), batchnorm=batchnorm)
        self._cache = []

    def forward(self, tokens):
        batch = pad_tokens(tokens, self.vocab_size)
        if self.pooling == "mean":
            pooled = self.pool.forward(batch)
        else:
            states = self.gru.forward(self.embed.forward(batch.ids), batch.mask)
            pooled = states[:, -1]  # padded steps carry the last real state
            self._cache.append(states.shape)
        return self.head.forward(pooled)

    def backward(self, upstream):
        g = self.head.backward(upstream)
        if self.pooling == "mean":
            self.pool.backward(g)
        else:
            shape = self._cache.pop()
            d_states = np.zeros(shape)
            d_states[:, -1] = g
            dx, _ = self.gru.backward(d_states)
            self.embed.backward(dx)
        return None

    encode = forward
