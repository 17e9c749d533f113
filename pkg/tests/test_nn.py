import numpy as np
import pytest

from ltd_retrieval.errors import BatchTooSmall, EmptyCaption, NoForwardCache, ShapeMismatch, TokenOutOfRange
from ltd_retrieval.linalg import SeededRng
from ltd_retrieval.nn import (
    GRU,
    BatchNorm1d,
    EmbeddingMeanPool,
    L2Normalize,
    Linear,
    Parameter,
    ParameterStore,
    ProjectionHead,
    ReLU,
    finite_difference_check,
    pad_tokens,
)


def identity_linear(d):
    lin = Linear(d, d, SeededRng(0))
    lin.weight.value[...] = np.eye(d)
    lin.bias.value[...] = 0.0
    return lin


def test_identity_linear_forward_and_backward():
    lin = identity_linear(3)
    x = SeededRng(1).normal(size=(2, 3))
    assert np.array_equal(lin.forward(x), x)
    g = SeededRng(2).normal(size=(2, 3))
    assert np.array_equal(lin.backward(g), g)


def test_relu_gates_forward_and_backward():
    relu = ReLU()
    assert np.array_equal(relu.forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    assert np.array_equal(relu.backward(np.array([[5.0, 5.0]])), [[0.0, 5.0]])


def test_mean_pool_averages_rows():
    pool = EmbeddingMeanPool(10, 4, SeededRng(0))
    table = pool.table.value
    out = pool.forward([[3, 7]])
    assert np.allclose(out[0], (table[3] + table[7]) / 2, atol=1e-15)


def test_mean_pool_handles_ragged_batches():
    pool = EmbeddingMeanPool(10, 4, SeededRng(0))
    out = pool.forward([[1], [2, 3, 4]])
    t = pool.table.value
    assert np.allclose(out[0], t[1])
    assert np.allclose(out[1], t[2:5].mean(axis=0))


def test_backward_without_forward_raises():
    for layer in (Linear(2, 2, SeededRng(0)), ReLU(), L2Normalize(), BatchNorm1d(2)):
        with pytest.raises(NoForwardCache):
            layer.backward(np.ones((1, 2)))


def test_shape_and_token_errors():
    with pytest.raises(ShapeMismatch):
        Linear(3, 2, SeededRng(0)).forward(np.ones((2, 4)))
    with pytest.raises(EmptyCaption):
        pad_tokens([[1], []])
    with pytest.raises(TokenOutOfRange):
        pad_tokens([[1, 12]], vocab_size=10)
    with pytest.raises(BatchTooSmall):
        BatchNorm1d(3).forward(np.ones((1, 3)))


def test_batchnorm_train_and_eval_modes():
    bn = BatchNorm1d(3)
    x = SeededRng(4).normal(size=(16, 3)) * 3 + 2
    y = bn.forward(x)
    assert np.allclose(y.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(y.std(axis=0), 1.0, atol=1e-5)
    bn.eval()
    z = bn.forward(x)
    expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(z, expected)


def test_projection_head_outputs_unit_rows():
    for bn in (False, True):
        head = ProjectionHead(5, 8, 4, SeededRng(3), batchnorm=bn)
        out = head.forward(SeededRng(5).normal(size=(7, 5)))
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-10)
    assert not hasattr(ProjectionHead(5, 8, 4, SeededRng(3), batchnorm=True).fc2, "bias")


def test_gru_padded_steps_carry_state():
    gru = GRU(3, 4, SeededRng(0))
    x = SeededRng(1).normal(size=(2, 3, 3))
    mask = np.array([[True, True, True], [True, False, False]])
    states = gru.forward(x, mask)
    assert np.array_equal(states[1, 1], states[1, 0])
    assert np.array_equal(states[1, 2], states[1, 0])
    alone = gru.forward(x[1:, :1], np.ones((1, 1), dtype=bool))
    assert np.allclose(alone[0, 0], states[1, 0], atol=1e-15)


def test_parameter_store_order_and_state_roundtrip():
    head = ProjectionHead(3, 4, 2, SeededRng(0))
    store = ParameterStore({"head": head})
    names = store.names()
    assert len(names) == len(set(names))
    assert ParameterStore({"head": ProjectionHead(3, 4, 2, SeededRng(9))}).names() == names
    saved = store.state_dict()
    for _, p in store:
        p.value += 1.0
    store.load_state_dict(saved)
    for name, p in store:
        assert np.array_equal(p.value, saved[name])


def test_fd_check_linear_quadratic_passes_tightly():
    lin = Linear(4, 3, SeededRng(0))
    x = SeededRng(1).normal(size=(5, 4))

    def fn(backward):
        y = lin.forward(x)
        loss = 0.5 * float(np.sum(y * y))
        if backward:
            lin.backward(y)
        else:
            lin.clear_cache()
        return loss

    report = finite_difference_check(fn, lin.named_parameters(), tolerance=1e-6)
    assert report.passed, report.max_rel_error


def test_fd_check_detects_scaled_gradient():
    lin = Linear(4, 3, SeededRng(0))
    x = SeededRng(1).normal(size=(5, 4))

    def fn(backward):
        y = lin.forward(x)
        loss = 0.5 * float(np.sum(y * y))
        if backward:
            lin.backward(1.1 * y)
        else:
            lin.clear_cache()
        return loss

    report = finite_difference_check(fn, lin.named_parameters())
    assert not report.passed
    assert report.max_error == pytest.approx(0.1 / 1.1, abs=1e-6)


def test_fd_check_accepts_input_parameters():
    x = Parameter(SeededRng(2).normal(size=(3, 4)))
    norm = L2Normalize()
    w = SeededRng(3).normal(size=(3, 4))

    def fn(backward):
        y = norm.forward(x.value)
        if backward:
            x.grad += norm.backward(w)
        else:
            norm.clear_cache()
        return float(np.sum(w * y))

    assert finite_difference_check(fn, [("x", x)]).passed
