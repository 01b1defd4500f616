"""Tensor ops, autodiff, Adam, gradient checking, parameter serialization and RNG streams."""
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdcot.numerics import (
    AdamState,
    DimensionError,
    FrozenParameterError,
    InvariantError,
    NumericError,
    ParamStore,
    RngStream,
    Tensor,
    adam_step,
    grad_check,
)
from sdcot.numerics import ops as T

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def store(**values):
    return ParamStore({k: np.asarray(v, dtype=np.float64) for k, v in values.items()})


# --- matmul ----------------------------------------------------------------
def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    assert out.values.tolist() == [[3], [4]]


def test_matmul_row_times_column():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).values.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_match_finite_differences():
    r = np.random.default_rng(0)
    p = store(a=r.normal(size=(4, 3)), b=r.normal(size=(3, 2)))
    w = r.normal(size=(4, 2))
    err = grad_check(lambda s: T.sum(T.mul(T.matmul(s["a"], s["b"]), w)), p)
    assert err <= 1e-6


# --- softmax / log-softmax -------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])


def test_softmax_large_input_does_not_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).values
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    x = [1, 2, 3]
    z = mpmath.fsum(mpmath.exp(v) for v in x)
    want = [float(mpmath.exp(v) / z) for v in x]
    np.testing.assert_allclose(T.softmax(Tensor(x)).values, want, rtol=0, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(x, rnd):
    out = T.softmax(Tensor(x)).values
    assert abs(out.sum() - 1.0) <= 1e-12
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(T.softmax(Tensor(x[perm])).values, out[perm], rtol=0, atol=1e-15)


def test_log_softmax_gradient():
    r = np.random.default_rng(1)
    p = store(x=r.normal(size=(3, 4)))
    w = r.normal(size=(3, 4))
    assert grad_check(lambda s: T.sum(T.mul(T.log_softmax(s["x"], axis=1), w)), p) <= 1e-6


# --- cross entropy ---------------------------------------------------------
def test_cross_entropy_uniform_logits():
    assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_confident_logits_high_precision():
    mpmath.mp.dps = 50
    want = float(-mpmath.log(mpmath.exp(10) / (mpmath.exp(10) + mpmath.exp(-10))))
    got = T.cross_entropy(Tensor([10.0, -10.0]), 0).item()
    assert want == pytest.approx(2.06e-9, rel=1e-2)
    assert got == pytest.approx(want, rel=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.cross_entropy(x, 1).backward()
    np.testing.assert_allclose(x.grad, [0.2689414213699951, -0.2689414213699951], atol=1e-12)


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor([0.0, 0.0]), 2)


def test_weighted_cross_entropy_with_zero_weights_stays_connected():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    loss = T.cross_entropy(x, [0, 1, 0], weights=np.zeros(3))
    loss.backward()
    assert loss.item() == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


# --- huber -----------------------------------------------------------------
def test_huber_identity_is_zero():
    assert T.huber(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0


def test_huber_quadratic_branch():
    assert T.huber(Tensor(0.5), Tensor(0.0)).item() == 0.125


def test_huber_linear_branch():
    assert T.huber(Tensor(3.0), Tensor(0.0)).item() == 2.5


def test_huber_shape_mismatch():
    with pytest.raises(DimensionError):
        T.huber(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_huber_gradient_both_branches():
    r = np.random.default_rng(2)
    p = store(x=r.normal(scale=2.0, size=(5, 3)))
    t = r.normal(size=(5, 3))
    w = np.array([1.0, 0.0, 2.0, 1.0, 0.5])
    assert grad_check(lambda s: T.huber(s["x"], Tensor(t), weights=w), p) <= 1e-6


# --- other ops and autodiff plumbing ----------------------------------------
@pytest.mark.parametrize("op", [
    lambda x: T.sum(T.square(T.relu(x))),
    lambda x: T.sum(T.exp(T.mul(x, 0.3))),
    lambda x: T.sum(T.log(T.add(T.square(x), 1.0))),
    lambda x: T.sum(T.sqrt(T.add(T.square(x), 0.5))),
    lambda x: T.sum(T.max(x, 1)),
    lambda x: T.sum(T.group_max(x, 2)),
    lambda x: T.mean(T.take_rows(x, [0, 0, 3, 1])),
    lambda x: T.sum(T.concat([x, T.mul(x, 2.0)], axis=1)),
    lambda x: T.sum(T.mul(T.reshape(x, (3, 4)), np.arange(12.0).reshape(3, 4))),
    lambda x: T.sum(T.linear(x, Tensor(np.ones((2, 3))), Tensor([0.5, -0.5]))),
    lambda x: T.sum(T.mul(T.transpose(x), np.arange(12.0).reshape(3, 4))),
], ids=["relu", "exp", "log", "sqrt", "max", "group_max", "take_rows", "concat", "reshape", "linear", "transpose"])
def test_op_gradients(op):
    x = np.random.default_rng(3).normal(size=(4, 3))
    assert grad_check(lambda s: op(s["x"]), store(x=x)) <= 1e-6


def test_group_max_matches_reshaped_max():
    x = np.random.default_rng(4).normal(size=(12, 5))
    a = Tensor(x, requires_grad=True)
    b = Tensor(x, requires_grad=True)
    g = np.random.default_rng(5).normal(size=(4, 5))
    T.sum(T.mul(T.group_max(a, 3), g)).backward()
    T.sum(T.mul(T.max(T.reshape(b, (4, 3, 5)), 1), g)).backward()
    np.testing.assert_array_equal(T.group_max(Tensor(x), 3).values, x.reshape(4, 3, 5).max(axis=1))
    np.testing.assert_array_equal(a.grad, b.grad)


def test_group_max_rejects_uneven_groups():
    with pytest.raises(DimensionError):
        T.group_max(Tensor(np.zeros((5, 2))), 2)


def test_shared_subexpression_accumulates_gradient():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x
    y.backward()
    assert x.grad == 7.0


def test_backward_requires_scalar_or_seed():
    with pytest.raises(DimensionError):
        (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()


def test_frozen_parameter_rejects_gradient():
    p = store(w=[1.0, 2.0]).freeze()
    with pytest.raises(FrozenParameterError):
        p.accumulate("w", np.ones(2))


def test_graph_skipped_without_trainable_inputs():
    out = T.mul(Tensor([1.0]), Tensor([2.0]))
    assert not out.requires_grad and out._backward is None


# --- Adam ------------------------------------------------------------------
def _reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        trace.append(p)
    return trace


def test_adam_zero_gradient_is_identity():
    p = store(w=[1.0, -2.0, 3.0])
    before = p["w"].values.copy()
    p["w"].grad = np.zeros(3)
    adam_step(p, AdamState())
    np.testing.assert_array_equal(p["w"].values, before)


def test_adam_single_step_moves_by_lr():
    p = store(w=[5.0])
    p["w"].grad = np.ones(1)
    adam_step(p, AdamState(lr=1e-3))
    assert p["w"].values[0] == pytest.approx(5.0 - 1e-3, abs=1e-10)


def test_adam_two_steps_match_reference_trace():
    p = store(w=[0.7])
    st_ = AdamState(lr=1e-3)
    got = []
    for _ in range(2):
        p["w"].grad = np.array([0.3])
        adam_step(p, st_)
        got.append(p["w"].values[0])
    want = _reference_adam(0.7, [0.3, 0.3])
    assert max(abs(a - b) for a, b in zip(got, want)) <= 1e-12


def test_adam_missing_gradient_raises():
    with pytest.raises(InvariantError):
        adam_step(store(w=[1.0]), AdamState())


def test_adam_clears_gradients():
    p = store(w=[1.0])
    p["w"].grad = np.ones(1)
    adam_step(p, AdamState())
    assert p["w"].grad is None


def test_adam_respects_mask_bitwise():
    p = store(w=[[1.0, 2.0], [3.0, 4.0]])
    p.set_mask("w", [[True, False], [False, True]])
    before = p["w"].values.copy()
    p["w"].grad = np.ones((2, 2))
    adam_step(p, AdamState(lr=0.1))
    assert p["w"].values[0, 1] == before[0, 1] and p["w"].values[1, 0] == before[1, 0]
    assert p["w"].values[0, 0] != before[0, 0]


# --- grad_check ------------------------------------------------------------
def test_grad_check_square():
    assert grad_check(lambda s: T.square(s["x"]), store(x=3.0)) <= 1e-9


def test_grad_check_constant():
    assert grad_check(lambda s: T.add(T.sum(T.mul(s["x"], 0.0)), 4.0), store(x=[1.0, 2.0])) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_raises():
    with pytest.raises(NumericError):
        grad_check(lambda s: T.log(s["x"]), store(x=[-1.0]))


# --- parameter serialization -------------------------------------------------
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3)),
              elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_param_text_round_trip_is_bit_exact(v):
    p = store(a=v, b=[1.5])
    q = ParamStore.from_text(p.to_text())
    assert q.names() == ["a", "b"]
    assert q["a"].values.tobytes() == v.tobytes()


def test_param_text_format_line():
    line = store(w=[1.0, 2.0]).to_text().splitlines()[1]
    assert line == "w 2 3ff00000000000004000000000000000"


def test_param_from_text_rejects_bad_header():
    with pytest.raises(ValueError):
        ParamStore.from_text("nope\n")


def test_duplicate_parameter_rejected():
    p = store(w=[1.0])
    with pytest.raises(InvariantError):
        p.add("w", [2.0])


# --- RNG streams -----------------------------------------------------------
def test_rng_same_seed_and_label_is_bitwise_identical():
    a = RngStream(7, "data").random(100)
    b = RngStream(7, "data").random(100)
    assert a.tobytes() == b.tobytes()


def test_rng_labels_and_seeds_are_independent():
    a = RngStream(7, "data").random(1000)
    b = RngStream(7, "init").random(1000)
    c = RngStream(8, "data").random(1000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.1 and abs(np.corrcoef(a, c)[0, 1]) < 0.1
    assert not np.array_equal(a, b)


def test_rng_child_does_not_consume_parent_draws():
    r = RngStream(1, "root")
    c0 = r.counter
    r.child("x").random(10)
    assert r.counter == c0
    np.testing.assert_array_equal(r.child("x").random(3), RngStream(1, "root/x").random(3))
