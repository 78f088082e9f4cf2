import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autolambda import autodiff as ad
from autolambda.autodiff import Tape, grad_check
from autolambda.checks import OPS, random_graph


def test_matmul_identity():
    out = ad.matmul(np.array([[1.0, 2], [3, 4]]), np.eye(2))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_mse_zero_residual():
    assert ad.mse_loss(np.array([1.0, 2]), np.array([1.0, 2])).item() == 0.0


def test_softmax_ce_two_equal_logits():
    loss = ad.softmax_cross_entropy(np.zeros((1, 2)), [0])
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_record_forward_dispatch_and_unknown():
    with Tape() as tape:
        out = ad.record_forward("scale", np.ones(3), c=2.0)
    assert len(tape) == 2
    np.testing.assert_array_equal(out.data, [2, 2, 2])
    with pytest.raises(ValueError):
        ad.record_forward("conv2d", np.ones(3))


@pytest.mark.parametrize("fn,args", [
    (ad.matmul, (np.ones((2, 3)), np.ones((2, 3)))),
    (ad.add, (np.ones((2, 3)), np.ones(2))),
    (ad.mul, (np.ones(2), np.ones(3))),
    (ad.mse_loss, (np.ones((2, 1)), np.ones((3, 1)))),
])
def test_shape_mismatch(fn, args):
    with pytest.raises(ad.ShapeMismatch):
        fn(*args)


def test_softmax_ce_bad_labels():
    with pytest.raises(ad.ShapeMismatch):
        ad.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])


def test_nonfinite_in_debug_mode():
    with pytest.raises(ad.NonFinite):
        ad.exp(np.array([1000.0]))


def test_nonfinite_not_screened_when_debug_off():
    ad.set_debug(False)
    out = ad.exp(np.array([1000.0]))
    assert np.isinf(out.data).all()


def test_backward_linear_map():
    with Tape() as tape:
        p = tape.param("p", [1.0, 1.0])
        g = tape.backward(ad.sum(ad.scale(p, 3.0)))
    np.testing.assert_array_equal(g["p"], [3.0, 3.0])


def test_backward_at_minimum_is_zero():
    t = np.array([0.3, -1.2])
    with Tape() as tape:
        p = tape.param("p", t.copy())
        g = tape.backward(ad.mse_loss(p, t))
    np.testing.assert_array_equal(g["p"], 0.0)


def test_unused_param_gets_zero_grad():
    with Tape() as tape:
        p = tape.param("p", [1.0, 2.0])
        tape.param("q", np.ones((2, 2)))
        g = tape.backward(ad.sum(p))
    np.testing.assert_array_equal(g["q"], np.zeros((2, 2)))


def test_backward_errors():
    with Tape() as tape:
        p = tape.param("p", [1.0, 2.0])
        with pytest.raises(ad.NotScalar):
            tape.backward(ad.scale(p, 2.0))
    other = Tape()
    with other:
        loss = ad.sum(other.param("q", [1.0]))
    with Tape() as tape:
        with pytest.raises(ad.DetachedNode):
            tape.backward(loss)
    with pytest.raises(ad.DetachedNode):
        ad.backward(ad.sum(np.ones(2)))


def test_param_registered_twice_is_same_node():
    with Tape() as tape:
        a = tape.param("p", [1.0])
        b = tape.param("p", [5.0])
        g = tape.backward(ad.sum(ad.add(a, b)))
    assert a.node == b.node
    np.testing.assert_array_equal(g["p"], [2.0])


def test_no_tape_evaluates_without_recording():
    assert ad.active_tape() is None
    out = ad.tanh(np.zeros(3))
    assert out.tape is None


def test_grad_check_quadratic_passes():
    rep = grad_check(lambda p: ad.sum(ad.mul(p["p"], p["p"])), {"p": np.array([0.3, -1.1, 2.0])}, h=1e-5, tol=1e-4)
    assert rep.passed


def _mlp_ce(x, labels):
    def build(p):
        h = ad.tanh(ad.add(ad.matmul(x, p["W1"]), p["b1"]))
        return ad.softmax_cross_entropy(ad.add(ad.matmul(h, p["W2"]), p["b2"]), labels)
    return build


def test_grad_check_mlp_softmax_passes(rng):
    x = rng.normal(size=(6, 3))
    params = {"W1": rng.normal(size=(3, 5)), "b1": rng.normal(size=5), "W2": rng.normal(size=(5, 4)), "b2": rng.normal(size=4)}
    rep = grad_check(_mlp_ce(x, rng.integers(0, 4, 6)), params, h=1e-5, tol=1e-4)
    assert rep.passed, rep.errors


def test_grad_check_catches_corrupted_rule(rng, monkeypatch):
    good = ad.PRIMITIVES["elementwise_tanh"]
    bad = ad.Primitive(good.forward, lambda g, v, out, cache, attrs: (g * (1.0 - out),))
    monkeypatch.setitem(ad.PRIMITIVES, "elementwise_tanh", bad)
    x = rng.normal(size=(6, 3))
    params = {"W1": rng.normal(size=(3, 5)), "b1": rng.normal(size=5), "W2": rng.normal(size=(5, 4)), "b2": rng.normal(size=4)}
    rep = grad_check(_mlp_ce(x, rng.integers(0, 4, 6)), params)
    assert not rep.passed
    assert rep.max_error > rep.tol


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda p: ad.sum(p["p"]), {"p": np.ones(2)}, h=0.0)


def test_random_graph_uses_every_primitive(rng):
    _, _, used = random_graph(rng)
    assert used == set(ad.PRIMITIVES) == set(OPS)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_graph_grad_check(seed):
    builder, params, _ = random_graph(np.random.default_rng(seed))
    assert grad_check(builder, params, tol=1e-4).passed


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, size=(4, 3))
    w0 = r.uniform(-2, 2, size=(3, 2))
    t = r.uniform(-2, 2, size=(4, 2))

    def grads(ca, cb):
        with Tape() as tape:
            w = tape.param("w", w0)
            z = ad.tanh(ad.matmul(x, w))
            l1 = ad.mse_loss(z, t)
            l2 = ad.sum(ad.exp(ad.scale(z, 0.5)))
            return tape.backward(ad.add(ad.scale(l1, ca), ad.scale(l2, cb)))["w"]

    combo = grads(a, b)
    np.testing.assert_allclose(combo, a * grads(1.0, 0.0) + b * grads(0.0, 1.0), rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_replay_is_bit_identical(seed):
    builder, params, _ = random_graph(np.random.default_rng(seed))
    with Tape() as tape:
        builder({k: tape.param(k, v) for k, v in params.items()})
    again = tape.replay()
    for a, b in zip(tape.values, again):
        assert np.array_equal(a, b)


def test_tensor_operators():
    with Tape() as tape:
        p = tape.param("p", [[1.0, 2.0]])
        out = (p @ np.eye(2)) + 1.0 * p
        g = tape.backward(ad.sum(out * p))
    np.testing.assert_allclose(g["p"], 4 * np.array([[1.0, 2.0]]))
