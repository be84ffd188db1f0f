import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfsmc import nncore as nn
from dfsmc.errors import ShapeError
from dfsmc.gradcheck import gradcheck, rel_error


def _loop_conv(x, w, b):
    C, S, T = x.shape
    O, _, m, n = w.shape
    out = np.zeros((O, S - m + 1, T - n + 1))
    for o in range(O):
        for s in range(S - m + 1):
            for t in range(T - n + 1):
                acc = b[o]
                for c in range(C):
                    for a in range(m):
                        for bb in range(n):
                            acc += x[c, s + a, t + bb] * w[o, c, a, bb]
                out[o, s, t] = acc
    return out


def test_conv_all_ones():
    out = nn.conv2d(np.ones((1, 3, 3)), nn.Kernel(np.ones((1, 1, 2, 2)), np.zeros(1)))
    assert out.shape == (1, 2, 2) and (out == 4).all()


def test_conv_unit_kernel_is_identity(rng):
    x = rng.normal(size=(1, 5, 6))
    assert np.array_equal(nn.conv2d(x, nn.Kernel(np.ones((1, 1, 1, 1)), np.zeros(1))), x)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 4, 4))
    w, b = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
    assert np.allclose(nn.conv2d(x, nn.Kernel(w, b)), _loop_conv(x, w, b), atol=1e-12, rtol=0)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 10**6))
def test_conv_matches_loop_oracle_random(cin, cout, k, pad, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(cin, 5, 6))
    w, b = r.normal(size=(cout, cin, k, k)), r.normal(size=cout)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    assert np.allclose(nn.conv2d(x, nn.Kernel(w, b), padding=pad), _loop_conv(xp, w, b), atol=1e-10)


def test_conv_backward_gradcheck(rng):
    layer = nn.Conv2D(1, 2, 3, rng=rng)
    layer.params["b"] = rng.normal(size=2)
    assert gradcheck(layer, rng.normal(size=(1, 1, 4, 4)), 1e-6).passed


def test_conv_shape_errors():
    k = nn.Kernel(np.ones((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError, match="channels"):
        nn.conv2d(np.ones((1, 4, 4)), k)
    with pytest.raises(ShapeError, match="larger"):
        nn.conv2d(np.ones((2, 2, 2)), k)
    with pytest.raises(ShapeError):
        nn.conv2d(np.ones(4), k)


def test_relu_gap_linear():
    assert nn.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert nn.global_avg_pool(np.full((2, 3, 4, 4), 2.5)).tolist() == [[2.5] * 3] * 2
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nn.linear(x, np.eye(3), np.zeros(3)), x)


def test_maxpool_ties_pick_first():
    x = np.array([[[[1.0, 1.0], [1.0, 1.0]]]])
    out, arg = nn.maxpool2x2(x)
    assert out.item() == 1.0 and arg.item() == 0
    g = nn.maxpool2x2_backward(np.ones_like(out), arg)
    assert g[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_odd_rejected():
    with pytest.raises(ShapeError):
        nn.maxpool2x2(np.zeros((1, 1, 3, 4)))


@given(arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-5, 5)))
def test_maxpool_matches_loop(x):
    out, _ = nn.maxpool2x2(x)
    for c in range(2):
        for i in range(2):
            for j in range(3):
                assert out[0, c, i, j] == x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()


# --- softmax / cross-entropy -------------------------------------------------

def test_softmax_examples(oracle):
    assert np.allclose(nn.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    assert nn.softmax([1000.0, 1000.0]).tolist() == [0.5, 0.5]
    assert np.allclose(nn.softmax([1.0, 2.0, 3.0]), oracle["softmax_1_2_3"], atol=1e-15)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
def test_softmax_is_a_distribution(v):
    p = nn.softmax(v)
    assert abs(p.sum() - 1.0) <= 1e-12 and (p >= 0).all() and (p <= 1).all()


def test_cross_entropy_examples(oracle):
    eps = 1e-6
    assert nn.cross_entropy(np.array([1 - 2 * eps, eps, eps]), 0) < 3 * eps
    for k, expected in oracle["cross_entropy_uniform"].items():
        assert nn.cross_entropy(np.full(int(k), 1 / int(k)), 0) == pytest.approx(expected, abs=1e-15)


def test_softmax_cross_entropy_gradient(rng):
    logits, labels = rng.normal(size=(4, 5)), np.array([0, 4, 2, 2])
    loss, grad = nn.softmax_cross_entropy(logits, labels)
    h = 1e-5
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (nn.softmax_cross_entropy(up, labels)[0] - nn.softmax_cross_entropy(dn, labels)[0]) / (2 * h)
    assert rel_error(grad, num) <= 1e-6
    expected = np.mean([-math.log(nn.softmax(logits[i])[labels[i]]) for i in range(4)])
    assert loss == pytest.approx(expected, rel=1e-12)


# --- optimisation ------------------------------------------------------------

def test_sgd_examples(oracle):
    p = {"w": np.zeros(1)}
    nn.sgd_step(p, {"w": np.ones(1)}, {}, lr=0.1, momentum=0.0)
    assert p["w"][0] == pytest.approx(oracle["sgd_one_step_mu0"], abs=1e-15)

    p = {"w": np.array([0.3, -2.0])}
    nn.sgd_step(p, {"w": np.zeros(2)}, {}, lr=0.1)
    assert p["w"].tolist() == [0.3, -2.0]

    p, v = {"w": np.zeros(1)}, {}
    for _ in range(2):
        nn.sgd_step(p, {"w": np.ones(1)}, v, lr=0.1, momentum=0.9)
    assert p["w"][0] == pytest.approx(oracle["sgd_two_steps_mu0_9"], abs=1e-15)


def test_sgd_preconditions():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        nn.sgd_step(p, {"w": np.ones(2)}, {}, lr=0.0)
    with pytest.raises(ValueError):
        nn.sgd_step(p, {"w": np.ones(2)}, {}, lr=0.1, momentum=1.0)
    with pytest.raises(ShapeError):
        nn.sgd_step(p, {"w": np.ones(3)}, {}, lr=0.1)


def test_sgd_frozen():
    p = {"a": np.zeros(1), "b": np.zeros(1)}
    nn.sgd_step(p, {"a": np.ones(1), "b": np.ones(1)}, {}, lr=1.0, frozen=frozenset({"a"}))
    assert p["a"][0] == 0.0 and p["b"][0] == -1.0


def test_glorot_bounds(rng):
    w = nn.glorot_uniform(rng, (200, 50), 50, 200)
    assert np.abs(w).max() <= math.sqrt(6 / 250)


# --- gradcheck itself ----------------------------------------------------------

def test_gradcheck_linear_and_stack(rng):
    lin = nn.Linear(4, 3, rng=rng)
    lin.params["b"] = rng.normal(size=3)
    assert gradcheck(lin, rng.normal(size=(5, 4)), 1e-6).max_rel_error <= 1e-6
    stack = nn.Sequential([("c", nn.Conv2D(1, 2, 3, rng=rng)), ("r", nn.ReLU()), ("p", nn.MaxPool2x2())])
    x = rng.normal(size=(2, 1, 6, 6))
    x = np.where(x >= 0, x + 0.05, x - 0.05)
    assert gradcheck(stack, x, 1e-4).passed


class _Doubled(nn.Linear):
    def backward(self, grad):
        dx = super().backward(grad)
        self.grads["w"] *= 2
        return dx


def test_gradcheck_catches_wrong_gradient(rng):
    rep = gradcheck(_Doubled(3, 2, rng=rng), rng.normal(size=(4, 3)), 1e-4)
    assert not rep.passed and rep.errors["w"] > 0.1
    assert rep.line().startswith("FAIL")
