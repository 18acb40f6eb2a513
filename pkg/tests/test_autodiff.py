"""Primitive-level checks for the tape engine: forward values, exact
gradients against central finite differences, and basic invariants."""

from __future__ import annotations

import numpy as np
import pytest

from promptdg import autodiff as ad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_softmax_symmetry():
    out = ad.softmax(ad.Array([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_l2_normalize_345():
    out = ad.l2_normalize(ad.Array([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)


def test_variance_population_convention():
    out = ad.variance(ad.Array([[1.0], [3.0]]), axis=0)
    assert out.data[0] == pytest.approx(1.0, abs=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = ad.Array(rng.normal(size=(6, 9)) * 40.0)
    s = ad.softmax(x, axis=-1)
    assert np.abs(s.data.sum(axis=-1) - 1.0).max() < 1e-12


def test_l2_normalize_unit_rows():
    rng = np.random.default_rng(1)
    x = ad.Array(rng.normal(size=(5, 7)))
    y = ad.l2_normalize(x)
    norms = np.sqrt((y.data**2).sum(axis=-1))
    assert np.abs(norms - 1.0).max() < 1e-12


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Array(np.ones((2, 3))), ad.Array(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Array(np.ones((2, 3))), ad.Array(np.ones((4, 5))))


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Array([0.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.Array([np.inf])


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    a = ad.tanh(ad.matmul(ad.Array(x), ad.Array(x))).data
    b = ad.tanh(ad.matmul(ad.Array(x), ad.Array(x))).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward: analytic cases
# ---------------------------------------------------------------------------


def test_square_derivative():
    x = ad.Array(3.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        tape.backward(y)
    assert x.grad == pytest.approx(6.0, abs=1e-15)


def test_tanh_derivative_at_zero():
    x = ad.Array(0.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.tanh(x)
        tape.backward(y)
    assert x.grad == pytest.approx(1.0, abs=1e-15)


def test_backward_requires_scalar():
    x = ad.Array(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, 2.0)
        with pytest.raises(ad.ShapeError):
            tape.backward(y)


def test_backward_detached_loss():
    x = ad.Array(1.0, requires_grad=True)
    with ad.Tape() as tape:
        _ = ad.mul(x, x)
        with pytest.raises(ad.TapeError):
            tape.backward(ad.Array(1.0))


def test_tape_cleared_after_backward():
    x = ad.Array(2.0, requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        tape.backward(y)
        with pytest.raises(ad.TapeError):
            tape.backward(y)


# ---------------------------------------------------------------------------
# backward: finite-difference oracle per primitive
# ---------------------------------------------------------------------------


def _check_grad(build, x0: np.ndarray, tol: float = 1e-6):
    """Compare tape gradient of scalar build(Array) with central differences."""

    def value(x):
        return float(build(ad.Array(x)).data)

    leaf = ad.Array(x0.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = build(leaf)
        tape.backward(loss)
    fd = ad.finite_difference(value, x0)
    assert leaf.grad is not None
    assert rel_err(leaf.grad, fd) <= tol


@pytest.mark.parametrize("seed", range(20))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))

    def build(x):
        h = ad.tanh(ad.matmul(x, ad.Array(w)))
        s = ad.log_softmax(h, axis=-1)
        n = ad.l2_normalize(ad.mean(x, axis=0))
        return ad.add(ad.sum_(ad.mul(s, s)), ad.sum_(ad.exp(ad.mul(n, 0.3))))

    _check_grad(build, x0)


@pytest.mark.parametrize(
    "op",
    [
        lambda x: ad.sum_(ad.tanh(x)),
        lambda x: ad.sum_(ad.exp(ad.mul(x, 0.5))),
        lambda x: ad.sum_(ad.log(ad.add(ad.mul(x, x), 1.0))),
        lambda x: ad.sum_(ad.softmax(x, axis=-1) * ad.Array(np.arange(12.0).reshape(3, 4))),
        lambda x: ad.sum_(ad.log_softmax(x, axis=-1) * ad.Array(np.arange(12.0).reshape(3, 4))),
        lambda x: ad.sum_(ad.variance(x, axis=0)),
        lambda x: ad.sum_(ad.variance(x, axis=1)),
        lambda x: ad.sum_(ad.l2_normalize(x)),
        lambda x: ad.sum_(ad.mean(x, axis=1)),
        lambda x: ad.sum_(ad.transpose(x) @ ad.Array(np.ones((3, 2)))),
        lambda x: ad.sum_(ad.concat([x, ad.mul(x, 2.0)], axis=0)),
        lambda x: ad.sum_(ad.reshape(x, (4, 3)) @ ad.Array(np.ones((3, 1)))),
    ],
)
def test_primitive_gradients(op):
    rng = np.random.default_rng(11)
    for seed in range(5):
        x0 = np.random.default_rng(seed).normal(size=(3, 4))
        _check_grad(op, x0)
    del rng


def test_broadcast_add_mul_gradients():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(5, 3))

    def build(v):
        return ad.sum_(ad.mul(ad.add(ad.Array(m), v), v))

    _check_grad(build, rng.normal(size=3))


def test_grad_accumulates_across_uses():
    x = ad.Array(np.array([1.0, 2.0]), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_(ad.add(ad.mul(x, 3.0), ad.mul(x, x)))
        tape.backward(y)
    assert np.allclose(x.grad, 3.0 + 2.0 * x.data)


# ---------------------------------------------------------------------------
# sgd
# ---------------------------------------------------------------------------


def test_sgd_noop_with_zero_grad():
    p = ad.Array(1.0, requires_grad=True)
    p.grad = np.zeros(())
    ad.sgd_step([p], lr=0.1)
    assert p.data == pytest.approx(1.0)
    assert p.grad is None


def test_sgd_single_step():
    p = ad.Array(1.0, requires_grad=True)
    p.grad = np.asarray(2.0)
    ad.sgd_step([p], lr=0.1)
    assert p.data == pytest.approx(0.8, abs=1e-15)


def test_sgd_weight_decay():
    p = ad.Array(1.0, requires_grad=True)
    p.grad = np.asarray(0.0)
    ad.sgd_step([p], lr=1e-3, weight_decay=5e-4)
    assert p.data == pytest.approx(1.0 - 1e-3 * 5e-4, abs=1e-18)


def test_sgd_missing_grad():
    p = ad.Array(1.0, requires_grad=True)
    with pytest.raises(ValueError):
        ad.sgd_step([p], lr=0.1)
