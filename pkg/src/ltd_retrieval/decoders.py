"""Reconstruction decoders and the frozen latent-target generator."""
from __future__ import annotations

import numpy as np

from .errors import EmptyCaption, NoForwardCache, ShapeMismatch, TokenOutOfRange
from .linalg import SeededRng, l2_normalize
from .losses import StepLogits
from .nn import GRU, Embedding, Linear, Module, ReLU, pad_tokens


class LatentTargetDecoder(Module):
    """``W3 relu(W2 relu(W1 z))`` without biases; output is not normalized."""

    def __init__(self, d_joint, d_hidden, d_target, rng):
        self.d_joint, self.d_target = d_joint, d_target
        self.w1 = Linear(d_joint, d_hidden, rng.fork(1), bias=False)
        self.act1 = ReLU()
        self.w2 = Linear(d_hidden, d_hidden, rng.fork(2), bias=False)
        self.act2 = ReLU()
        self.w3 = Linear(d_hidden, d_target, rng.fork(3), bias=False)

    def forward(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.d_joint:
            raise ShapeMismatch(f"expected (*, {self.d_joint}) latents, got {z.shape}")
        return self.w3.forward(self.act2.forward(self.w2.forward(self.act1.forward(self.w1.forward(z)))))

    def backward(self, upstream):
        g = self.w2.backward(self.act2.backward(self.w3.backward(upstream)))
        return self.w1.backward(self.act1.backward(g))

    decode = forward


class InputTokenDecoder(Module):
    """Teacher-forced GRU that reconstructs the caption tokens from ``z``.

    ``z`` conditions the decoder only through the initial hidden state
    ``h0 = W_init z + b``.  Step ``t`` reads the embedding of token ``t-1``
    (a dedicated begin-of-sequence id at ``t = 0``).  Its token embeddings
    are separate from the caption encoder's and trained from scratch.
    """

    def __init__(self, vocab_size, d_joint, d_dec, d_tok, rng):
        self.vocab_size, self.d_joint = vocab_size, d_joint
        self.bos = vocab_size
        self.init_map = Linear(d_joint, d_dec, rng.fork(1))
        self.embed = Embedding(vocab_size + 1, d_tok, rng.fork(2))
        self.gru = GRU(d_tok, d_dec, rng.fork(3))
        self.out = Linear(d_dec, vocab_size, rng.fork(4))
        self._cache = []

    def forward(self, z, teacher):
        batch = pad_tokens(teacher, self.vocab_size)
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (len(batch), self.d_joint):
            raise ShapeMismatch(f"latents {z.shape} do not match {len(batch)} captions")
        B, T = batch.ids.shape
        inputs = np.empty((B, T), dtype=np.int64)
        inputs[:, 0] = self.bos
        inputs[:, 1:] = batch.ids[:, :-1]
        h0 = self.init_map.forward(z)
        states = self.gru.forward(self.embed.forward(inputs), batch.mask, h0)
        logits = self.out.forward(states.reshape(B * T, -1)).reshape(B, T, self.vocab_size)
        self._cache.append(states.shape)
        return StepLogits(logits, batch.mask)

    def backward(self, d_logits):
        if not self._cache:
            raise NoForwardCache("InputTokenDecoder.backward called before forward")
        B, T, H = self._cache.pop()
        d_states = self.out.backward(d_logits.reshape(B * T, -1)).reshape(B, T, H)
        dx, dh0 = self.gru.backward(d_states)
        self.embed.backward(dx)
        return self.init_map.backward(dh0)

    decode = forward


class TargetGenerator:
    """Frozen stand-in for a sentence encoder.

    ``y = normalize(T @ bag(tokens))`` where ``T`` is a seeded Gaussian
    matrix of shape ``(d_target, n_semantic)``.  Only semantic token ids
    (``0 <= id < n_semantic``) are accepted.  ``T`` is a plain array, not a
    trainable parameter.
    """

    def __init__(self, n_semantic, d_target, seed):
        self.n_semantic, self.d_target, self.seed = n_semantic, d_target, int(seed)
        self.projection = SeededRng(self.seed).normal(size=(d_target, n_semantic))
        self.projection.setflags(write=False)

    def bag(self, tokens):
        tokens = np.asarray(list(tokens), dtype=np.int64)
        if tokens.size == 0:
            raise EmptyCaption("latent target needs at least one semantic token")
        if tokens.min() < 0 or tokens.max() >= self.n_semantic:
            raise TokenOutOfRange(f"semantic tokens must lie in [0, {self.n_semantic})")
        return np.bincount(tokens, minlength=self.n_semantic).astype(np.float64)

    def generate(self, tokens):
        return l2_normalize(self.projection @ self.bag(tokens))

    def generate_batch(self, sequences):
        return np.stack([self.generate(s) for s in sequences])
