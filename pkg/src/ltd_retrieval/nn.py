"""Layers with hand-written backward passes.

Every layer follows the same contract: ``forward`` caches what the backward
pass needs, ``backward(upstream)`` returns the gradient with respect to the
layer input and *adds* parameter gradients into ``Parameter.grad``.  Calling
``backward`` without a preceding ``forward`` raises :class:`NoForwardCache`.

GRU equations (gate order r, z, n, as in the common cuDNN/PyTorch layout)::

    r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchTooSmall,
    EmptyCaption,
    NoForwardCache,
    ShapeMismatch,
    TokenOutOfRange,
)
from .linalg import l2_normalize_rows, l2_normalize_rows_backward


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


class Module:
    """Minimal container that auto-registers parameters and sub-modules."""

    training = True

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        items = []
        for name, p in self.__dict__.get("_params", {}).items():
            items.append((prefix + name, p))
        for name, child in self.__dict__.get("_children", {}).items():
            items.extend(child.named_parameters(prefix + name + "."))
        return sorted(items, key=lambda kv: kv[0])

    def named_buffers(self, prefix=""):
        items = []
        for name in getattr(self, "_buffer_names", ()):
            items.append((prefix + name, getattr(self, name)))
        for name, child in self.__dict__.get("_children", {}).items():
            items.extend(child.named_buffers(prefix + name + "."))
        return sorted(items, key=lambda kv: kv[0])

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def clear_cache(self):
        cache = self.__dict__.get("_cache")
        if isinstance(cache, list):
            cache.clear()
        for child in self.__dict__.get("_children", {}).values():
            child.clear_cache()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self.__dict__.get("_children", {}).values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if state[name].shape != p.value.shape:
                raise ShapeMismatch(f"{name}: {state[name].shape} != {p.value.shape}")
            p.value[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _pop(cache, layer):
    if not cache:
        raise NoForwardCache(f"{type(layer).__name__}.backward called before forward")
    return cache.pop()


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(_uniform_init(rng, (out_dim, in_dim), in_dim))
        self.has_bias = bias
        if bias:
            self.bias = Parameter(np.zeros(out_dim))
        self._cache = []

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"Linear expects (*, {self.in_dim}), got {x.shape}")
        self._cache.append(x)
        y = x @ self.weight.value.T
        if self.has_bias:
            y = y + self.bias.value
        return y

    def backward(self, upstream):
        x = _pop(self._cache, self)
        self.weight.grad += upstream.T @ x
        if self.has_bias:
            self.bias.grad += upstream.sum(axis=0)
        return upstream @ self.weight.value


class ReLU(Module):
    def __init__(self):
        self._cache = []

    def forward(self, x):
        mask = x > 0
        self._cache.append(mask)
        return np.where(mask, x, 0.0)

    def backward(self, upstream):
        return np.where(_pop(self._cache, self), upstream, 0.0)


class L2Normalize(Module):
    """Row-wise projection onto the unit sphere."""

    def __init__(self):
        self._cache = []

    def forward(self, x):
        y, norms = l2_normalize_rows(x)
        self._cache.append((y, norms))
        return y

    def backward(self, upstream):
        y, norms = _pop(self._cache, self)
        return l2_normalize_rows_backward(y, norms, upstream)


class BatchNorm1d(Module):
    """Batch statistics in training, running averages (momentum 0.1) in eval."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.dim, self.momentum, self.eps = dim, momentum, eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache = []

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatch(f"BatchNorm1d expects (*, {self.dim}), got {x.shape}")
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise BatchTooSmall("BatchNorm1d needs at least 2 rows in training mode")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache.append((xhat, inv_std, self.training))
        return self.gamma.value * xhat + self.beta.value

    def backward(self, upstream):
        xhat, inv_std, training = _pop(self._cache, self)
        self.gamma.grad += (upstream * xhat).sum(axis=0)
        self.beta.grad += upstream.sum(axis=0)
        dxhat = upstream * self.gamma.value
        if not training:
            return dxhat * inv_std
        n = upstream.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class ProjectionHead(Module):
    """Linear -> ReLU -> Linear [-> BatchNorm1d] -> unit-sphere normalization.

    With BatchNorm the second Linear has no bias: the batch mean would cancel it.
    """

    def __init__(self, in_dim, hidden_dim, out_dim, rng, batchnorm=False):
        self.fc1 = Linear(in_dim, hidden_dim, rng.fork(1))
        self.act = ReLU()
        self.fc2 = Linear(hidden_dim, out_dim, rng.fork(2), bias=not batchnorm)
        self.use_bn = batchnorm
        if batchnorm:
            self.bn = BatchNorm1d(out_dim)
        self.norm = L2Normalize()

    def forward(self, x):
        h = self.fc2.forward(self.act.forward(self.fc1.forward(x)))
        if self.use_bn:
            h = self.bn.forward(h)
        return self.norm.forward(h)

    def backward(self, upstream):
        g = self.norm.backward(upstream)
        if self.use_bn:
            g = self.bn.backward(g)
        return self.fc1.backward(self.act.backward(self.fc2.backward(g)))


@dataclass
class TokenBatch:
    """Right-padded token ids with a validity mask."""

    ids: np.ndarray
    mask: np.ndarray

    @property
    def lengths(self):
        return self.mask.sum(axis=1)

    def __len__(self):
        return self.ids.shape[0]


def pad_tokens(sequences, vocab_size=None):
    """Validate and pad a list of token sequences (or a 2-d int array)."""
    if isinstance(sequences, TokenBatch):
        return sequences
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        ids = sequences.astype(np.int64)
        mask = np.ones(ids.shape, dtype=bool)
        if ids.shape[1] == 0:
            raise EmptyCaption("empty token sequence")
    else:
        seqs = [list(s) for s in sequences]
        if not seqs:
            raise EmptyCaption("no sequences given")
        longest = max(len(s) for s in seqs)
        if min(len(s) for s in seqs) == 0:
            raise EmptyCaption("empty token sequence")
        ids = np.zeros((len(seqs), longest), dtype=np.int64)
        mask = np.zeros((len(seqs), longest), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
    if vocab_size is not None:
        valid = ids[mask]
        if valid.size and (valid.min() < 0 or valid.max() >= vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {vocab_size})")
    return TokenBatch(ids, mask)


class Embedding(Module):
    """Plain lookup table; input gradient is not defined (integer input)."""

    def __init__(self, vocab_size, dim, rng):
        self.vocab_size, self.dim = vocab_size, dim
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        self._cache = []

    def forward(self, ids):
        self._cache.append(ids)
        return self.table.value[ids]

    def backward(self, upstream):
        ids = _pop(self._cache, self)
        np.add.at(self.table.grad, ids.reshape(-1), upstream.reshape(-1, self.dim))
        return None


class EmbeddingMeanPool(Module):
    """Average of the embeddings of each sequence's tokens."""

    def __init__(self, vocab_size, dim, rng):
        self.vocab_size, self.dim = vocab_size, dim
        self.table = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        self._cache = []

    def forward(self, tokens):
        batch = pad_tokens(tokens, self.vocab_size)
        weights = batch.mask / batch.lengths[:, None]
        self._cache.append((batch, weights))
        return np.einsum("bl,bld->bd", weights, self.table.value[batch.ids])

    def backward(self, upstream):
        batch, weights = _pop(self._cache, self)
        contrib = weights[:, :, None] * upstream[:, None, :]
        np.add.at(self.table.grad, batch.ids[batch.mask], contrib[batch.mask])
        return None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GRUCell(Module):
    def __init__(self, input_dim, hidden_dim, rng):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        h3 = 3 * hidden_dim
        self.w_ih = Parameter(_uniform_init(rng.fork(1), (h3, input_dim), hidden_dim))
        self.w_hh = Parameter(_uniform_init(rng.fork(2), (h3, hidden_dim), hidden_dim))
        self.b_ih = Parameter(_uniform_init(rng.fork(3), (h3,), hidden_dim))
        self.b_hh = Parameter(_uniform_init(rng.fork(4), (h3,), hidden_dim))
        self._cache = []

    def forward(self, x, h):
        if x.shape[1] != self.input_dim or h.shape[1] != self.hidden_dim:
            raise ShapeMismatch(f"GRUCell got x {x.shape}, h {h.shape}")
        H = self.hidden_dim
        gi = x @ self.w_ih.value.T + self.b_ih.value
        gh = h @ self.w_hh.value.T + self.b_hh.value
        r = _sigmoid(gi[:, :H] + gh[:, :H])
        z = _sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
        gh_n = gh[:, 2 * H :]
        n = np.tanh(gi[:, 2 * H :] + r * gh_n)
        self._cache.append((x, h, r, z, n, gh_n))
        return (1.0 - z) * n + z * h

    def backward(self, upstream):
        """Returns ``(d_input, d_hidden)``."""
        x, h, r, z, n, gh_n = _pop(self._cache, self)
        dn_pre = upstream * (1.0 - z) * (1.0 - n * n)
        dz_pre = upstream * (h - n) * z * (1.0 - z)
        dr_pre = dn_pre * gh_n * r * (1.0 - r)
        dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        self.w_ih.grad += dgi.T @ x
        self.b_ih.grad += dgi.sum(axis=0)
        self.w_hh.grad += dgh.T @ h
        self.b_hh.grad += dgh.sum(axis=0)
        return dgi @ self.w_ih.value, upstream * z + dgh @ self.w_hh.value


class GRU(Module):
    """Unrolls a GRUCell over a padded batch; padded steps carry the state."""

    def __init__(self, input_dim, hidden_dim, rng):
        self.hidden_dim = hidden_dim
        self.cell = GRUCell(input_dim, hidden_dim, rng)
        self._cache = []

    def forward(self, x, mask, h0=None):
        """``x``: (B, T, I), ``mask``: (B, T). Returns all states (B, T, H)."""
        B, T, _ = x.shape
        h = np.zeros((B, self.hidden_dim)) if h0 is None else h0
        states = np.empty((B, T, self.hidden_dim))
        m = mask.astype(np.float64)[:, :, None]
        for t in range(T):
            h_new = self.cell.forward(x[:, t], h)
            h = m[:, t] * h_new + (1.0 - m[:, t]) * h
            states[:, t] = h
        self._cache.append((m, x.shape))
        return states

    def backward(self, d_states):
        """Returns ``(d_x, d_h0)``; ``d_states`` is (B, T, H)."""
        m, shape = _pop(self._cache, self)
        B, T, _ = shape
        dx = np.empty(shape)
        dh = np.zeros((B, self.hidden_dim))
        for t in reversed(range(T)):
            dh = dh + d_states[:, t]
            dx_t, dh_prev = self.cell.backward(m[:, t] * dh)
            dx[:, t] = dx_t
            dh = dh_prev + (1.0 - m[:, t]) * dh
        return dx, dh


class ParameterStore:
    """Deterministically ordered view over the parameters of named modules."""

    def __init__(self, modules):
        self.modules = dict(modules)
        items = []
        for mod_name, module in self.modules.items():
            items.extend((f"{mod_name}.{n}", p) for n, p in module.named_parameters())
        self._items = sorted(items, key=lambda kv: kv[0])

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def names(self):
        return [n for n, _ in self._items]

    def zero_grads(self):
        for _, p in self._items:
            p.grad[...] = 0.0

    def values(self):
        return {n: p.value.copy() for n, p in self._items}

    def grads(self):
        return {n: p.grad.copy() for n, p in self._items}

    def load(self, values):
        for n, p in self._items:
            p.value[...] = values[n]

    def state_dict(self):
        """Parameters and buffers (e.g. BatchNorm running statistics)."""
        state = {}
        for mod_name, module in self.modules.items():
            for k, v in module.state_dict().items():
                state[f"{mod_name}.{k}"] = v
        return dict(sorted(state.items()))

    def load_state_dict(self, state):
        for mod_name, module in self.modules.items():
            prefix = mod_name + "."
            module.load_state_dict(
                {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
            )


@dataclass
class GradCheckReport:
    max_rel_error: dict
    eps: float
    tolerance: float
    entries_checked: int = 0
    worst: str = field(default="")

    @property
    def max_error(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error <= self.tolerance


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(fn, params, tolerance=1e-4, eps=1e-5):
    """Compare analytic gradients with central differences.

    ``fn(backward)`` must run the forward pass and return the scalar loss;
    with ``backward=True`` it must also run the backward pass so that every
    ``Parameter.grad`` in ``params`` holds the analytic gradient.  Inputs
    can be checked by wrapping them in a :class:`Parameter` as well.
    ``params`` is a mapping or a sequence of ``(name, Parameter)`` pairs.
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        p.grad[...] = 0.0
    fn(True)
    analytic = {name: p.grad.copy() for name, p in items}

    errors = {}
    count = 0
    for name, p in items:
        flat = p.value.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = fn(False)
            flat[i] = orig - eps
            lm = fn(False)
            flat[i] = orig
            numeric[i] = (lp - lm) / (2.0 * eps)
        count += flat.size
        err = relative_error(analytic[name].reshape(-1), numeric)
        errors[name] = float(err.max()) if err.size else 0.0
    worst = max(errors, key=errors.get) if errors else ""
    return GradCheckReport(errors, eps, tolerance, count, worst)
