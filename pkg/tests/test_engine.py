import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fas import engine as E
from fas import rng as rngs
from fas.errors import ConfigError, NumericError, ShapeError
from fas.optim import AdamWState, adamw_step, lr_at, warmup_steps


def matmul_oracle(A, B):
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += A[i, t] * B[t, j]
            C[i, j] = acc
    return C


def central_diff(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def tape_grad(build, *arrays):
    """Gradients of sum(w * build(*vars)) for a fixed random weighting w."""
    tape = E.Tape()
    vars_ = [tape.param(f"x{i}", a) for i, a in enumerate(arrays)]
    out = build(*vars_)
    w = np.random.default_rng(123).standard_normal(out.shape)
    loss = E.sum_all(E.mul(out, tape.const(w)))
    grads = tape.backward(loss)
    return [grads[f"x{i}"] for i in range(len(arrays))], w


def check_op(build, *arrays, tol=1e-4):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads, w = tape_grad(build, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            tape = E.Tape()
            return float((build(*[tape.const(v) for v in args]).value * w).sum())

        fd = central_diff(f, a.copy())
        err = np.abs(fd - grads[i]) / np.maximum(np.maximum(np.abs(fd), np.abs(grads[i])), 1e-8)
        assert err.max() <= tol, (i, err.max())


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    tape = E.Tape()
    M = np.arange(12.0).reshape(3, 4)
    out = E.matmul(tape.const(np.eye(3)), tape.const(M))
    np.testing.assert_array_equal(out.value, M)


def test_matmul_hand_case():
    tape = E.Tape()
    out = E.matmul(tape.const([[1.0, 2.0], [3.0, 4.0]]), tape.const([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.value, [[17.0], [39.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    tape = E.Tape()
    out = E.matmul(tape.const(A), tape.const(B)).value
    assert np.max(np.abs(out - matmul_oracle(A, B))) <= 1e-12


def test_matmul_shape_error_names_operands():
    tape = E.Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        E.matmul(tape.const(np.ones((2, 3))), tape.const(np.ones((2, 3))))


def test_matmul_gradients_are_transposed_products():
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    (gA, gB), w = tape_grad(E.matmul, A, B)
    np.testing.assert_allclose(gA, w @ B.T, atol=1e-14)
    np.testing.assert_allclose(gB, A.T @ w, atol=1e-14)


def test_batched_matmul_reduces_shared_weight_grad():
    rng = np.random.default_rng(2)
    X, W = rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 2))
    (gX, gW), w = tape_grad(E.matmul, X, W)
    np.testing.assert_allclose(gW, sum(X[i].T @ w[i] for i in range(3)), atol=1e-12)
    check_op(E.matmul, X, W)


# ---------------------------------------------------------------- softmax


def test_softmax_equal_row_is_uniform():
    tape = E.Tape()
    np.testing.assert_allclose(E.softmax_rows(tape.const([[3.0] * 4])).value, [[0.25] * 4], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    tape = E.Tape()
    y = E.softmax_rows(tape.const([[1000.0, 0.0]])).value
    assert y[0, 0] == pytest.approx(1.0) and y[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_closed_form():
    tape = E.Tape()
    y = E.softmax_rows(tape.const([[0.0, math.log(3.0)]])).value
    np.testing.assert_allclose(y, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = np.random.default_rng(seed).uniform(-1e3, 1e3, size=(m, n))
    y = E.softmax_rows(E.Tape().const(x)).value
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-9)


# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_uniform_is_ln7():
    loss = E.cross_entropy(E.Tape().const(np.zeros((1, 7))), [3])
    assert float(loss.value) == pytest.approx(math.log(7), abs=1e-12)
    assert float(loss.value) == pytest.approx(1.945910, abs=1e-6)


def test_cross_entropy_saturated():
    logits = np.array([[50.0, 0, 0, 0, 0, 0, 0]])
    assert float(E.cross_entropy(E.Tape().const(logits), [0]).value) <= 1e-9


def test_cross_entropy_direct_formula():
    z = [1.0, 2.0, 0, 0, 0, 0, 0]
    direct = -math.log(math.exp(2.0) / sum(math.exp(v) for v in z))
    loss = E.cross_entropy(E.Tape().const(np.array([z])), [1])
    assert abs(float(loss.value) - direct) <= 1e-12


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[1.0, 2.0, 0, -1, 0.5, 0, 3]])
    tape = E.Tape()
    logits = tape.param("z", z)
    g = tape.backward(E.cross_entropy(logits, [4]))["z"]
    p = np.exp(z) / np.exp(z).sum()
    p[0, 4] -= 1
    np.testing.assert_allclose(g, p, atol=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ConfigError):
        E.cross_entropy(E.Tape().const(np.zeros((1, 7))), [7])


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    tape = E.Tape()
    W = tape.param("W", np.array([[1.0, -2.0], [3.0, 0.5]]))
    np.testing.assert_array_equal(tape.backward(E.sum_all(W))["W"], np.ones((2, 2)))


def test_backward_fan_out_doubles():
    rng = np.random.default_rng(3)
    Wv, xv = rng.standard_normal((3, 2)), rng.standard_normal((2, 1))

    def grad(times):
        tape = E.Tape()
        W, x = tape.param("W", Wv), tape.const(xv)
        terms = [E.sum_all(E.matmul(W, x)) for _ in range(times)]
        loss = terms[0]
        for t in terms[1:]:
            loss = E.add(loss, t)
        return tape.backward(loss)["W"]

    once = grad(1)
    np.testing.assert_allclose(grad(2), 2 * once, atol=1e-15)
    np.testing.assert_allclose(grad(5), 5 * once, atol=1e-14)


def test_backward_unused_param_gets_exact_zero():
    tape = E.Tape()
    a = tape.param("a", np.ones((2, 2)))
    tape.param("unused", np.ones(3))
    grads = tape.backward(E.sum_all(a))
    np.testing.assert_array_equal(grads["unused"], np.zeros(3))


def test_backward_requires_scalar():
    tape = E.Tape()
    with pytest.raises(ShapeError):
        tape.backward(tape.param("a", np.ones((2, 2))))


def test_tape_is_topologically_ordered():
    tape = E.Tape()
    a = tape.param("a", np.ones((2, 2)))
    E.sum_all(E.gelu(E.matmul(a, a)))
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        assert all(position[id(p)] < i for p in node.parents)


def test_non_finite_is_reported_with_op_name():
    tape = E.Tape()
    with pytest.raises(NumericError) as info, np.errstate(over="ignore"):
        E.scale(tape.const(np.array([1e308])), 10.0)
    assert info.value.op == "scale"


# ---------------------------------------------------- finite-difference checks

RNG = np.random.default_rng(7)


def _r(*shape):
    return RNG.standard_normal(shape)


@pytest.mark.parametrize(
    "build, arrays",
    [
        (E.matmul, (_r(3, 4), _r(4, 5))),
        (E.add, (_r(3, 4), _r(4))),
        (E.sub, (_r(2, 3), _r(2, 3))),
        (E.mul, (_r(2, 3), _r(1, 3))),
        (lambda a: E.scale(a, -1.7), (_r(2, 3),)),
        (E.one_minus, (_r(2, 3),)),
        (E.transpose, (_r(2, 3, 4),)),
        (lambda a: E.reshape(a, (6, 2)), (_r(3, 4),)),
        (lambda a, b: E.concat([a, b], axis=-2), (_r(2, 3), _r(4, 3))),
        (lambda a: E.broadcast_to(a, (3, 2, 4)), (_r(1, 4),)),
        (E.softmax_rows, (_r(3, 5),)),
        (E.gelu, (_r(4, 3),)),
        (E.sigmoid, (_r(4, 3) * 4,)),
        (E.mean_rows, (_r(2, 5, 3),)),
        (lambda a: E.mean_rows(a, np.array([[1, 1, 0, 0, 1], [0, 1, 1, 1, 1]], bool)), (_r(2, 5, 3),)),
        (lambda a: E.gather_rows(a, np.array([[0, 2, 2], [4, 1, -1]]),
                                 np.array([[1, 1, 1], [1, 1, 0]], bool)), (_r(2, 5, 3),)),
        (lambda a: E.reshape(E.cross_entropy(a, [1, 6]), (1,)), (_r(2, 7),)),
        (lambda a: E.dropout(a, 0.5, True, rngs.stream(1, "dropout")), (_r(4, 4),)),
    ],
)
def test_op_matches_finite_differences(build, arrays):
    # dropout re-seeds inside build so its mask is a constant of the check
    check_op(build, *arrays)


# ---------------------------------------------------------------- dropout


def test_dropout_eval_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    tape = E.Tape()
    v = tape.const(x)
    assert E.dropout(v, 0.9, False, None) is v


def test_dropout_rate_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = E.dropout(E.Tape().const(x), 0.0, True, rngs.stream(0, "dropout"))
    np.testing.assert_array_equal(out.value, x)


def test_dropout_law_of_large_numbers():
    out = E.dropout(E.Tape().const(np.ones(10**6)), 0.4, True, rngs.stream(42, "dropout")).value
    assert abs(out.mean() - 1.0) <= 0.01
    assert abs((out == 0).mean() - 0.4) <= 0.005


def test_dropout_rejects_rate_one():
    with pytest.raises(ConfigError):
        E.dropout(E.Tape().const(np.ones(3)), 1.0, True, rngs.stream(0, "dropout"))


# ---------------------------------------------------------------- AdamW


def scalar_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * wd * theta
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_adamw_zero_grad_no_decay_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamWState.for_params(p, weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_pure_decay():
    p = {"w": np.array([1.0])}
    state = AdamWState.for_params(p, weight_decay=0.01)
    adamw_step(p, {"w": np.zeros(1)}, state, lr=0.1)
    assert p["w"][0] == pytest.approx(0.999, abs=1e-15)


def test_adamw_first_step_matches_scalar_oracle():
    p = {"w": np.array([0.5])}
    state = AdamWState.for_params(p, weight_decay=0.0)
    adamw_step(p, {"w": np.ones(1)}, state, lr=1e-3)
    assert abs(p["w"][0] - scalar_adamw(0.5, [1.0], 1e-3, 0.0)) <= 1e-12
    assert p["w"][0] - 0.5 == pytest.approx(-1e-3, rel=1e-7)


def test_adamw_multi_step_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.7, 0.0, 2.5]
    p = {"w": np.array([0.8])}
    state = AdamWState.for_params(p, weight_decay=1e-2)
    for g in grads:
        adamw_step(p, {"w": np.array([g])}, state, lr=5e-2)
    assert abs(p["w"][0] - scalar_adamw(0.8, grads, 5e-2, 1e-2)) <= 1e-12
    assert state.step == len(grads)


def test_adamw_shape_mismatch():
    p = {"w": np.zeros(3)}
    state = AdamWState.for_params(p)
    with pytest.raises(ShapeError):
        adamw_step(p, {"w": np.zeros(4)}, state)


def test_adamw_frozen_param_untouched():
    p = {"w": np.ones(2), "f": np.zeros(2)}
    state = AdamWState.for_params(p)
    adamw_step(p, {"w": np.ones(2), "f": np.ones(2)}, state, lr=0.1, frozen={"f"})
    np.testing.assert_array_equal(p["f"], 0.0)
    np.testing.assert_array_equal(state.m["f"], 0.0)


# ---------------------------------------------------------------- schedule


def test_lr_schedule_pins():
    total = 1000
    warm = warmup_steps(total, 0.05)
    assert warm == 50
    assert lr_at(0, total, 2e-4, 0.05) == 0.0
    assert lr_at(warm, total, 2e-4, 0.05) == 2e-4
    assert lr_at(total, total, 2e-4, 0.05) == pytest.approx(0.0, abs=1e-20)
    assert abs(lr_at(warm + (total - warm) // 2, total, 2e-4, 0.05) - 1e-4) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5000), st.floats(0.0, 0.9))
def test_lr_schedule_shape(total, ratio):
    warm = warmup_steps(total, ratio)
    lrs = [lr_at(t, total, 1.0, ratio) for t in range(total + 1)]
    if warm < total:
        assert lrs[warm] == 1.0
        assert lrs[total] == pytest.approx(0.0, abs=1e-15)
    decay = lrs[warm:]
    assert all(b <= a + 1e-15 for a, b in zip(decay, decay[1:]))
    assert all(0.0 <= v <= 1.0 for v in lrs)


def test_lr_schedule_errors():
    with pytest.raises(ConfigError):
        lr_at(0, 0, 1.0, 0.05)
    with pytest.raises(ConfigError):
        lr_at(0, 10, 1.0, 1.0)
