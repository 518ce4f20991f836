import numpy as np
import pytest

import textvae.autodiff as ad
from textvae.autodiff import (
    Tensor,
    grad_check,
    matmul,
    pointwise,
    reduce,
    softmax_cross_entropy,
    softmax_cross_entropy_cols,
    tape,
    zero_grads,
)
from textvae.errors import ConfigError, ContractError, DimensionError, NumericError


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_column_selection():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(a, Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    report = grad_check(lambda: reduce("sum", matmul(a, b)), {"a": a, "b": b}, tol=1e-6)
    assert report.passed, str(report)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_sigmoid_tanh_at_zero():
    assert pointwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert pointwise("tanh", Tensor(0.0)).item() == 0.0


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    report = grad_check(lambda: ad.sigmoid(x), {"x": x}, tol=1e-6)
    assert report.passed
    zero_grads([x])
    with tape() as t:
        t.backward(ad.sigmoid(x))
    assert abs(float(x.grad) - 0.25) < 1e-12


def test_sigmoid_saturates_without_nan():
    y = ad.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.allclose(y.data, [0.0, 1.0])
    assert np.all(np.isfinite(y.data))


def test_log_domain_error():
    with pytest.raises(NumericError):
        ad.log(Tensor([1.0, 0.0]))


def test_exp_overflow_error():
    with pytest.raises(NumericError):
        ad.exp(Tensor(800.0))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_scalar_broadcast():
    x = Tensor([1.0, 2.0, 3.0])
    assert np.array_equal((x + 1.0).data, [2.0, 3.0, 4.0])
    assert np.array_equal((2.0 * x).data, [2.0, 4.0, 6.0])


def test_unknown_pointwise_kind():
    with pytest.raises(ConfigError):
        pointwise("cosh", Tensor(0.0))


def test_cross_entropy_uniform_logits():
    out = softmax_cross_entropy(Tensor(np.zeros(4)), 2)
    assert abs(out.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_large_logits_stable():
    out = softmax_cross_entropy(Tensor([1000.0, 0.0]), 0)
    assert 0.0 <= out.item() < 1e-12


def test_cross_entropy_matches_bruteforce_oracle():
    # direct normalized-probability computation, no log-sum-exp trick
    rng = np.random.default_rng(1)
    logits = rng.uniform(-2, 2, 10)
    target = 7
    probs = np.exp(logits) / np.exp(logits).sum()
    expected = -np.log(probs[target])

    t = Tensor(logits, requires_grad=True)
    with tape() as tp:
        out = softmax_cross_entropy(t, target)
        tp.backward(out)
    assert abs(out.item() - expected) < 1e-10
    onehot = np.zeros(10)
    onehot[target] = 1.0
    assert np.max(np.abs(t.grad - (probs - onehot))) < 1e-10


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_cross_entropy_cols_matches_scalar_version():
    rng = np.random.default_rng(2)
    logits = rng.uniform(-3, 3, (6, 5))
    targets = [0, 5, 2, 3, 1]
    row = softmax_cross_entropy_cols(Tensor(logits), targets)
    for j, tgt in enumerate(targets):
        single = softmax_cross_entropy(Tensor(logits[:, j]), tgt)
        assert abs(row.data[0, j] - single.item()) < 1e-12


def test_reduce_trivials():
    assert reduce("squared_l2_norm", Tensor([3.0, 4.0])).item() == 25.0
    assert reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0


def test_sum_gradient_is_ones():
    x = Tensor([5.0, -1.0, 2.0], requires_grad=True)
    with tape() as t:
        t.backward(reduce("sum", x))
    assert np.array_equal(x.grad, np.ones(3))
    report = grad_check(lambda: reduce("sum", x), {"x": x}, tol=1e-6)
    assert report.passed


def test_squared_l2_backward_analytic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape() as t:
        t.backward(ad.squared_l2_norm(x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape() as t:
        y = ad.scale(x, 2.0)
        with pytest.raises(ContractError):
            t.backward(y)


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with tape() as t:
        loss = ad.squared_l2_norm(x)
        t.backward(loss)
        t.backward(loss)
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_backward_linearity_of_sums():
    rng = np.random.default_rng(3)
    xd = rng.uniform(-2, 2, 4)
    x1 = Tensor(xd, requires_grad=True)
    with tape() as t:
        loss = ad.add(ad.squared_l2_norm(x1), ad.reduce_sum(ad.tanh(x1)))
        t.backward(loss)

    x2 = Tensor(xd, requires_grad=True)
    with tape() as t:
        t.backward(ad.squared_l2_norm(x2))
    with tape() as t:
        t.backward(ad.reduce_sum(ad.tanh(x2)))
    assert np.max(np.abs(x1.grad - x2.grad)) < 1e-12


def test_zero_grads_resets():
    x = Tensor([1.0], requires_grad=True)
    with tape() as t:
        t.backward(ad.reduce_sum(x))
    assert x.grad[0] == 1.0
    zero_grads([("x", x)])
    assert x.grad[0] == 0.0


def test_forward_is_reproducible():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-2, 2, (3, 3)))
    w = Tensor(rng.uniform(-2, 2, (3, 3)))
    a = ad.sigmoid(matmul(w, x)).data
    b = ad.sigmoid(matmul(w, x)).data
    assert np.array_equal(a, b)


def test_structural_ops_gradients():
    rng = np.random.default_rng(5)
    a = Tensor(rng.uniform(-2, 2, (2, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    c = Tensor(rng.uniform(-2, 2, (2, 1)), requires_grad=True)

    def f():
        cat = ad.concat_rows(a, b)
        sel = ad.select_columns(cat, [0, 2, 2])
        plus = ad.add_col(ad.select_columns(a, [0, 1]), c)
        return ad.add(ad.squared_l2_norm(sel), ad.reduce_sum(ad.column_sums(plus)))

    report = grad_check(f, {"a": a, "b": b, "c": c}, tol=1e-6)
    assert report.passed, str(report)


def test_concat_cols_roundtrip_and_grad():
    rng = np.random.default_rng(6)
    parts = [Tensor(rng.uniform(-1, 1, (3, 1)), requires_grad=True) for _ in range(4)]
    out = ad.concat_cols(parts)
    assert out.shape == (3, 4)
    report = grad_check(lambda: ad.squared_l2_norm(ad.concat_cols(parts)),
                        [(f"p{i}", p) for i, p in enumerate(parts)], tol=1e-6)
    assert report.passed


def test_maximum_scalar_kink():
    x = Tensor(3.0, requires_grad=True)
    with tape() as t:
        t.backward(ad.maximum_scalar(x, 8.0))
    assert float(x.grad) == 0.0  # clamped branch: constant, no gradient
    y = Tensor(10.0, requires_grad=True)
    with tape() as t:
        t.backward(ad.maximum_scalar(y, 8.0))
    assert float(y.grad) == 1.0


def test_grad_check_sigmoid_matmul_passes():
    rng = np.random.default_rng(7)
    w = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)
    x = Tensor(rng.uniform(-2, 2, (3, 2)))
    report = grad_check(lambda: ad.reduce_mean(ad.sigmoid(matmul(w, x))), {"w": w}, tol=1e-5)
    assert report.passed


def test_grad_check_detects_corrupted_backward():
    rng = np.random.default_rng(8)
    w = Tensor(rng.uniform(-2, 2, (3, 3)), requires_grad=True)
    ad._CORRUPT_TANH_BACKWARD = True
    try:
        report = grad_check(lambda: ad.reduce_sum(ad.tanh(w)), {"w": w}, tol=1e-5)
    finally:
        ad._CORRUPT_TANH_BACKWARD = False
    assert not report.passed
    assert report.max_error > 100 * report.tol


def test_grad_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    const = Tensor(7.0)
    report = grad_check(lambda: ad.reduce_sum(ad.mul(const, const)), {"x": x}, tol=1e-6)
    assert report.passed
    assert report.max_error == 0.0


def test_grad_check_rejects_nondeterminism():
    rng = np.random.default_rng(9)
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: ad.reduce_sum(ad.scale(x, float(rng.uniform()))), {"x": x})


def test_gradient_flows_through_deep_chain_vs_fd():
    # composite program covering most op kinds at once
    rng = np.random.default_rng(10)
    w1 = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    w2 = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (2, 1)), requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, (3, 5)))

    def f():
        h = ad.tanh(matmul(w1, x))
        y = ad.add_col(matmul(w2, h), b)
        z = ad.exp(ad.scale(y, 0.1))
        return ad.add(ad.squared_l2_norm(ad.sigmoid(y)), ad.reduce_mean(ad.log(z)))

    report = grad_check(f, {"w1": w1, "w2": w2, "b": b}, tol=1e-5)
    assert report.passed, str(report)
