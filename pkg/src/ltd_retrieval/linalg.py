"""Dense float64 helpers and the seeded random stream.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64;
the functions here validate shapes and finiteness at the package boundary.

``SeededRng`` wraps numpy's Philox4x64-10 bit generator, a counter-based
generator whose output is fully determined by ``(seed, stream)`` on every
platform.  Independent sub-streams are derived with :meth:`SeededRng.fork`,
which mixes extra integers into the seed sequence, so adding draws to one
consumer never shifts the numbers seen by another.
"""
from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, NonFinite, ShapeMismatch, ZeroNorm

NORM_EPS = 1e-12


def as_vector(values, name="vector"):
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 1-d array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return v


def as_matrix(values, name="matrix"):
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return m


def l2_normalize(v):
    """Return ``v / ||v||``; raises :class:`ZeroNorm` below 1e-12."""
    v = as_vector(v)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < NORM_EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def l2_normalize_rows(m):
    """Row-wise normalization. Returns ``(normalized, norms)``."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms < NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroNorm(f"row {bad} has norm {norms[bad]:.3g}")
    return m / norms[:, None], norms


def l2_normalize_rows_backward(normalized, norms, upstream):
    """Gradient of ``x / ||x||`` given the forward outputs.

    d(x/|x|)/dx = (I - y y^T) / |x|, applied row by row.
    """
    dots = np.einsum("ij,ij->i", upstream, normalized)
    return (upstream - normalized * dots[:, None]) / norms[:, None]


def cosine_similarity(u, v):
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise LengthMismatch(f"length {u.size} vs {v.size}")
    value = float(np.dot(l2_normalize(u), l2_normalize(v)))
    return min(1.0, max(-1.0, value))


def stable_softmax(logits):
    """Softmax of a 1-d array with max-shifting against overflow."""
    x = as_vector(logits, "logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class SeededRng:
    """Reproducible random stream keyed by a 64-bit seed and a stream path."""

    def __init__(self, seed, stream=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def fork(self, *stream):
        """Independent child stream; unaffected by draws on the parent."""
        return SeededRng(self.seed, self.stream + tuple(stream))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def unit_vectors(self, count, dim):
        v = self._gen.normal(size=(count, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
