"""Numerics: op correctness against independent oracles, gradients vs FD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import evotoken.tensor as T
from evotoken.errors import (
    ContractError,
    DegenerateBatchError,
    NumericError,
    ShapeMismatchError,
    VocabularyError,
)


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def assert_grad_matches(param: T.Tensor, loss_fn, rtol: float = 1e-4, also_zero=()):
    param.zero_grad()
    for other in also_zero:
        other.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    fd = fd_grad(lambda: loss_fn().item(), param.data)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(param.grad)), 1e-6)
    rel = np.abs(fd - param.grad) / denom
    assert rel.max() < rtol, f"gradient mismatch: {rel.max()}"


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_projector_selects_row():
    proj = T.Tensor([[1.0, 0.0], [0.0, 0.0]])
    m = T.Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(T.matmul(proj, m).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    assert np.abs(got - expected).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(5, 4))
        c = rng.normal(size=(4, 2))
        left = T.matmul(T.matmul(T.Tensor(a), T.Tensor(b)), T.Tensor(c)).data
        right = T.matmul(T.Tensor(a), T.matmul(T.Tensor(b), T.Tensor(c))).data
        scale = np.abs(left).max() + 1e-12
        assert np.abs(left - right).max() / scale < 1e-9


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0])).data
    assert np.abs(out - 1 / 3).max() < 1e-12


def test_softmax_closed_form():
    out = T.softmax(T.Tensor([np.log(2.0), 0.0])).data
    assert abs(out[0] - 2 / 3) < 1e-9
    assert abs(out[1] - 1 / 3) < 1e-9


def test_softmax_matches_extended_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    logits = [3.1, -2.0, 0.4]
    temp = 0.5
    exps = [mpmath.exp(mpmath.mpf(x) / temp) for x in logits]
    total = sum(exps)
    expected = np.array([float(e / total) for e in exps])
    got = T.softmax(T.Tensor(logits), temperature=temp).data
    assert np.abs(got - expected).max() < 1e-9


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        T.softmax(T.Tensor([1.0, np.nan]))


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ContractError):
        T.softmax(T.Tensor([1.0, 2.0]), temperature=0.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=12),
    st.floats(min_value=0.1, max_value=4.0),
)
def test_softmax_simplex_and_shift_invariance(vals, temp):
    x = np.array(vals)
    out = T.softmax(T.Tensor(x), temperature=temp).data
    assert out.min() >= 0
    assert abs(out.sum() - 1.0) < 1e-6
    shifted = T.softmax(T.Tensor(x + 7.3), temperature=temp).data
    assert np.abs(out - shifted).max() < 1e-9


def test_softmax_trailing_axis_per_row():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6))
    out = T.softmax(T.Tensor(x)).data
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_confident_correct():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = 50.0
    logits[1, 3] = 50.0
    loss = T.cross_entropy(T.Tensor(logits), [1, 3])
    assert loss.item() < 1e-9


def test_cross_entropy_uniform_closed_form():
    loss = T.cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert abs(loss.item() - np.log(4)) < 1e-12


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 8))
    targets = rng.integers(0, 8, size=5)
    weights = rng.uniform(0.1, 2.0, size=5)
    # per-position manual computation
    total, wsum = 0.0, 0.0
    for i in range(5):
        row = logits[i]
        p = np.exp(row - row.max())
        p = p / p.sum()
        total += weights[i] * -np.log(p[targets[i]])
        wsum += weights[i]
    expected = total / wsum
    got = T.cross_entropy(T.Tensor(logits), targets, weights).item()
    assert abs(got - expected) < 1e-10


def test_cross_entropy_all_zero_weights():
    with pytest.raises(DegenerateBatchError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 1], [0.0, 0.0])


def test_cross_entropy_target_out_of_range():
    with pytest.raises(VocabularyError):
        T.cross_entropy(T.Tensor(np.zeros((1, 3))), [3])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_is_ones():
    w = T.parameter(np.arange(4.0).reshape(2, 2))
    T.backward(T.tensor_sum(w))
    assert np.array_equal(w.grad, np.ones((2, 2)))


def test_backward_quadratic_form():
    rng = np.random.default_rng(4)
    w = T.parameter(rng.normal(size=(2, 2)))
    loss = T.tensor_sum(T.mul(w, w)) * 0.5
    T.backward(loss)
    assert np.abs(w.grad - w.data).max() < 1e-12


def test_backward_requires_scalar():
    w = T.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        T.backward(T.mul(w, w))


def test_backward_accumulates_without_reset():
    w = T.parameter(np.ones(3))
    T.backward(T.tensor_sum(w))
    T.backward(T.tensor_sum(w))
    assert np.array_equal(w.grad, 2 * np.ones(3))


def test_two_layer_network_grads_match_fd():
    rng = np.random.default_rng(5)
    w1 = T.parameter(rng.normal(scale=0.5, size=(4, 6)))
    w2 = T.parameter(rng.normal(scale=0.5, size=(6, 3)))
    x = np.asarray(rng.normal(size=(2, 4)))
    targets = np.array([0, 2])

    def loss_fn():
        h = T.gelu(T.matmul(T.Tensor(x), w1))
        return T.cross_entropy(T.matmul(h, w2), targets)

    assert_grad_matches(w1, loss_fn, also_zero=[w2])
    assert_grad_matches(w2, loss_fn, also_zero=[w1])


@pytest.mark.parametrize(
    "name",
    ["matmul", "softmax", "layer_norm", "gelu", "take_rows", "replace_rows",
     "reshape_transpose", "add_broadcast", "mul_broadcast", "mean"],
)
def test_per_op_gradients_match_fd(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    p = T.parameter(rng.normal(size=(3, 4)))

    def build():
        if name == "matmul":
            return T.matmul(p, T.Tensor(rng2))
        if name == "softmax":
            return T.softmax(p, temperature=0.7)
        if name == "layer_norm":
            return T.layer_norm(p, gamma, beta)
        if name == "gelu":
            return T.gelu(p)
        if name == "take_rows":
            return T.take_rows(p, [2, 0, 2])
        if name == "replace_rows":
            return T.replace_rows(p, [1], consts)
        if name == "reshape_transpose":
            return T.transpose(T.reshape(p, (2, 3, 2)), (1, 0, 2))
        if name == "add_broadcast":
            return T.add(p, T.Tensor(row))
        if name == "mul_broadcast":
            return T.mul(p, T.Tensor(row))
        if name == "mean":
            return T.tensor_mean(T.mul(p, p))

    rng2 = rng.normal(size=(4, 2))
    gamma = T.Tensor(rng.normal(size=4) + 1.0)
    beta = T.Tensor(rng.normal(size=4))
    consts = rng.normal(size=(1, 4))
    row = rng.normal(size=(1, 4))

    def loss_fn():
        out = build()
        return T.tensor_sum(T.mul(out, T.Tensor(np.ones_like(out.data) * 0.3)))

    # quadratic weighting makes the scalar sensitive to every element
    def loss_fn2():
        out = build()
        return T.tensor_sum(T.mul(out, out))

    assert_grad_matches(p, loss_fn)
    assert_grad_matches(p, loss_fn2)


def test_layer_norm_param_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 5))
    gamma = T.parameter(rng.normal(size=5) + 1.0)
    beta = T.parameter(rng.normal(size=5))

    def loss_fn():
        out = T.layer_norm(T.Tensor(x), gamma, beta)
        return T.tensor_sum(T.mul(out, out))

    assert_grad_matches(gamma, loss_fn, also_zero=[beta])
    assert_grad_matches(beta, loss_fn, also_zero=[gamma])


def test_cross_entropy_logit_gradients():
    rng = np.random.default_rng(8)
    logits = T.parameter(rng.normal(size=(4, 5)))
    targets = np.array([1, 0, 4, 2])
    weights = np.array([1.0, 0.0, 2.0, 0.5])

    def loss_fn():
        return T.cross_entropy(logits, targets, weights)

    assert_grad_matches(logits, loss_fn)


def test_no_grad_disables_recording():
    w = T.parameter(np.ones(3))
    with T.no_grad():
        out = T.tensor_sum(T.mul(w, w))
    assert not out.requires_grad
    assert out._backward_fn is None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_sgd_single_step():
    w = T.parameter(np.array(0.0))
    w.grad = np.array(1.0)
    T.optimizer_step([w], T.OptimizerState(lr=0.1, rule="sgd"))
    assert abs(w.item() + 0.1) < 1e-15


def test_zero_gradient_is_fixed_point_for_sgd():
    w = T.parameter(np.array([1.0, -2.0]))
    w.grad = np.zeros(2)
    T.optimizer_step([w], T.OptimizerState(lr=0.5, rule="sgd"))
    assert np.array_equal(w.data, [1.0, -2.0])


def test_sgd_converges_on_quadratic():
    w = T.parameter(np.array(0.0))
    state = T.OptimizerState(lr=0.1, rule="sgd")
    for _ in range(100):
        w.grad = np.array(2 * (w.item() - 3.0))
        T.optimizer_step([w], state)
    assert abs(w.item() - 3.0) < 1e-6


def test_adamw_decay_shrinks_weights_without_gradient():
    w = T.parameter(np.array([4.0]))
    state = T.OptimizerState(lr=0.1, weight_decay=0.01)
    w.grad = np.zeros(1)
    T.optimizer_step([w], state)
    assert w.data[0] == pytest.approx(4.0 * (1 - 0.1 * 0.01))


def test_optimizer_zeroes_grads():
    w = T.parameter(np.ones(2))
    w.grad = np.ones(2)
    state = T.OptimizerState(lr=0.01)
    T.optimizer_step([w], state)
    assert w.grad is None
    assert state.step_count == 1


def test_negative_lr_rejected():
    with pytest.raises(ContractError):
        T.OptimizerState(lr=-1e-3)


def test_default_dtype_round_trip():
    T.set_default_dtype("float32")
    try:
        assert T.Tensor([1, 2, 3]).dtype == np.float32
    finally:
        T.set_default_dtype("float64")
    assert T.Tensor([1, 2, 3]).dtype == np.float64
