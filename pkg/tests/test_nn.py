import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from docglare.nn import (AdamState, Concat, Conv2D, InstanceNorm, MaxPool2, ModelGraph, Node,
                         ShapeError, Upsample2, WeightFormatError, adam_step, conv2d,
                         instance_norm, load_weights, maxpool2, pos_weight_for,
                         receptive_field, save_weights, upsample2, weighted_bce,
                         weighted_bce_logits)

import oracles


def _conv(cin, cout, k, act="none", seed=0, bias=True):
    rng = np.random.default_rng(seed)
    layer = Conv2D(cin, cout, k, act, rng=rng, dtype=np.float64)
    if bias:
        layer.bias[:] = rng.standard_normal(cout)
    return layer


def test_instance_norm_constant_and_stats():
    x = np.full((5, 6, 2), 3.5)
    assert np.array_equal(instance_norm(x), np.zeros_like(x))
    y = instance_norm(np.random.default_rng(0).standard_normal((7, 9, 3)) * 4 + 2)
    assert np.abs(y.mean(axis=(0, 1))).max() < 1e-5
    assert np.abs(y.var(axis=(0, 1)) - 1).max() < 1e-4
    assert InstanceNorm().params() == {}


@given(arrays(np.float64, (4, 5, 2), elements=st.floats(-10, 10)),
       st.floats(0.5, 5), st.floats(-20, 20))
@settings(max_examples=50)
def test_instance_norm_affine_invariance(x, a, c):
    x = x + np.linspace(0, 1, x.size).reshape(x.shape)  # keep channels non-constant
    # eps makes the invariance approximate; compare at a scale where it is negligible
    x = x * 100
    assert np.abs(instance_norm(a * x + c) - instance_norm(x)).max() < 1e-5


def test_instance_norm_oracle():
    x = np.random.default_rng(1).standard_normal((6, 4, 3))
    assert np.abs(instance_norm(x) - oracles.instance_norm(x)).max() < 1e-12


def test_conv_identity_1x1():
    layer = Conv2D(1, 1, 1, "none", dtype=np.float64)
    layer.weight[:] = 1
    x = np.random.default_rng(0).standard_normal((5, 4, 1))
    assert np.array_equal(conv2d(x, layer), x)


@pytest.mark.parametrize("k,act", [(1, "none"), (3, "relu"), (3, "sigmoid"), (5, "none")])
def test_conv_matches_loop_oracle(k, act):
    rng = np.random.default_rng(k)
    layer = _conv(3, 4, k, act, seed=k)
    x = rng.standard_normal((6, 5, 3))
    assert np.abs(conv2d(x, layer) - oracles.conv2d(x, layer.weight, layer.bias, act)).max() < 1e-10


def test_conv_float32_matches_oracle():
    rng = np.random.default_rng(3)
    layer = Conv2D(4, 3, 3, "relu", rng=rng)
    layer.bias[:] = rng.standard_normal(3)
    x = rng.standard_normal((7, 6, 4)).astype(np.float32)
    assert np.abs(conv2d(x, layer) - oracles.conv2d(x, layer.weight, layer.bias, "relu")).max() < 1e-5


def test_conv_linearity():
    rng = np.random.default_rng(4)
    layer = _conv(2, 3, 3, bias=False)
    x, y = rng.standard_normal((2, 5, 5, 2))
    lhs = conv2d(2.0 * x - 3.0 * y, layer)
    assert np.allclose(lhs, 2.0 * conv2d(x, layer) - 3.0 * conv2d(y, layer), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(np.zeros((4, 4, 2)), _conv(3, 1, 1))


def test_conv_chunked_equals_single_pass(monkeypatch):
    import docglare.nn as nn
    layer = _conv(3, 2, 3)
    x = np.random.default_rng(5).standard_normal((2, 9, 7, 3))
    whole = layer.forward(x)
    monkeypatch.setattr(nn, "_COL_BUDGET", 50)
    assert np.allclose(layer.forward(x), whole, atol=1e-12)


def test_receptive_fields():
    assert receptive_field([1, 3, 3]) == [1, 3, 5]
    assert receptive_field([1, 3, 3, 3, 3, 3, 1]) == [1, 3, 5, 7, 9, 11, 11]


def test_pool_and_upsample():
    x = np.array([1., 2., 3., 4.]).reshape(2, 2, 1)
    assert maxpool2(x).ravel().tolist() == [4.0]
    c = np.full((4, 6, 2), 7.0)
    assert np.array_equal(maxpool2(c), np.full((2, 3, 2), 7.0))
    assert np.array_equal(upsample2(c), np.full((8, 12, 2), 7.0))
    assert np.array_equal(upsample2(maxpool2(c)), c)
    with pytest.raises(ShapeError):
        maxpool2(np.zeros((3, 4, 1)))


@given(arrays(np.float64, (6, 4, 2), elements=st.floats(-100, 100)))
@settings(max_examples=50)
def test_pool_upsample_oracles(x):
    assert np.array_equal(maxpool2(x), oracles.maxpool2(x))
    assert np.array_equal(upsample2(x), oracles.upsample2(x))


# -- gradients -------------------------------------------------------------

def _grad_check(layer, x, rng):
    """Compare analytic input and parameter gradients of sum(out * proj) with central differences."""
    xb = x[None]
    out = layer.forward(xb)
    proj = rng.standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(proj)

    def f():
        return float((layer.forward(xb) * proj).sum())

    checks = [(dx, oracles.finite_diff(f, xb))]
    for name, p in layer.params().items():
        checks.append((layer.grads()[name].copy(), oracles.finite_diff(f, p)))
    for got, want in checks:
        err = np.abs(got - want).max() / max(1.0, np.abs(want).max())
        assert err < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    k = [1, 3][seed % 2]
    act = ["none", "relu", "sigmoid"][seed % 3]
    layer = _conv(int(rng.integers(1, 4)), int(rng.integers(1, 4)), k, act, seed)
    _grad_check(layer, rng.standard_normal((4, 5, layer.in_channels)), rng)


@pytest.mark.parametrize("seed", range(3))
def test_norm_pool_upsample_gradients(seed):
    rng = np.random.default_rng(seed)
    _grad_check(InstanceNorm(), rng.standard_normal((3, 4, 2)), rng)
    _grad_check(MaxPool2(), rng.standard_normal((4, 6, 2)), rng)
    _grad_check(Upsample2(), rng.standard_normal((2, 3, 2)), rng)


def test_graph_gradient_with_fanout_and_concat():
    rng = np.random.default_rng(11)
    nodes = [Node("a", _conv(2, 3, 3, "relu", 1), ["x"]),
             Node("b", _conv(3, 2, 1, "none", 2), ["a"]),
             Node("cat", Concat(), ["a", "b", "y"]),
             Node("out", _conv(6, 1, 3, "sigmoid", 3), ["cat"])]
    g = ModelGraph(nodes, {"x": 2, "y": 1})
    feeds = {"x": rng.standard_normal((1, 4, 4, 2)), "y": rng.standard_normal((1, 4, 4, 1))}
    out = g.forward(feeds)
    proj = rng.standard_normal(out.shape)
    g.zero_grad()
    dins = g.backward(proj)

    def f():
        return float((g.forward(feeds) * proj).sum())

    for name, p in g.named_params().items():
        want = oracles.finite_diff(f, p)
        assert np.abs(g.named_grads()[name] - want).max() < 1e-6 * max(1, np.abs(want).max()) + 1e-7
    for port in ("x", "y"):
        want = oracles.finite_diff(f, feeds[port])
        assert np.abs(dins[port] - want).max() < 1e-6


# -- losses ----------------------------------------------------------------

def test_bce_values():
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert weighted_bce(t, t)[0] < 1e-5
    assert abs(weighted_bce(np.full((3, 3), 0.5), np.zeros((3, 3)))[0] - math.log(2)) < 1e-12
    assert abs(weighted_bce(np.full((2, 2), 0.5), t, 3.0)[0] - math.log(2) * (3 + 1) / 2) < 1e-12
    with pytest.raises(ShapeError):
        weighted_bce(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(3))
def test_bce_gradients(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, (4, 5))
    t = (rng.random((4, 5)) > 0.5).astype(float)
    pw = float(rng.uniform(0.5, 10))
    _, g = weighted_bce(p, t, pw)
    assert np.allclose(g, oracles.finite_diff(lambda: weighted_bce(p, t, pw)[0], p), rtol=1e-4, atol=1e-9)
    z = rng.standard_normal((4, 5)) * 3
    loss, gz = weighted_bce_logits(z, t, pw)
    assert abs(loss - weighted_bce(1 / (1 + np.exp(-z)), t, pw)[0]) < 1e-9
    assert np.allclose(gz, oracles.finite_diff(lambda: weighted_bce_logits(z, t, pw)[0], z), rtol=1e-4, atol=1e-9)


def test_pos_weight():
    assert pos_weight_for(np.zeros(10)) == 1.0
    assert pos_weight_for(np.array([1, 0, 0, 0])) == 3.0
    assert pos_weight_for(np.eye(100)[0]) == 50.0


# -- adam ------------------------------------------------------------------

def test_adam_defaults_and_behaviour():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (0.001, 0.99, 0.999, 1e-8)
    w = np.array([1.0, -2.0])
    adam_step([w], [np.zeros(2)], s)
    assert w.tolist() == [1.0, -2.0]
    w = np.array([1.0])
    s = AdamState(lr=0.1)
    adam_step([w], [2 * w], s)
    assert w[0] ** 2 < 1.0
    # bias-corrected first step moves by lr * sign(g)
    assert abs(w[0] - 0.9) < 1e-6
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(3)
    ref_w, m, v = w.copy(), np.zeros(3), np.zeros(3)
    s = AdamState(lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adam_step([w], [g], s)
        m = 0.99 * m + 0.01 * g
        v = 0.999 * v + 0.001 * g * g
        ref_w -= 0.01 * (m / (1 - 0.99 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(w, ref_w, rtol=0, atol=1e-12)
    assert s.step == 5


# -- weights ---------------------------------------------------------------

def test_weights_roundtrip(tmp_path):
    g = ModelGraph([Node("c", Conv2D(2, 3, 3, rng=np.random.default_rng(0)), ["x"]),
                    Node("d", Conv2D(3, 1, 1, "sigmoid", rng=np.random.default_rng(1)), ["c"])],
                   {"x": 2})
    p = tmp_path / "w.glnw"
    save_weights(g, p)
    state = load_weights(p)
    assert list(state) == list(g.named_params())
    assert all(np.array_equal(state[k], v) for k, v in g.named_params().items())
    assert sum(a.size for a in state.values()) == g.param_count() == 3 * 3 * 2 * 3 + 3 + 3 + 1
    raw = p.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(WeightFormatError):
        load_weights(tmp_path / "short")
    other = ModelGraph([Node("c", Conv2D(2, 4, 3), ["x"]),
                        Node("d", Conv2D(4, 1, 1, "sigmoid"), ["c"])], {"x": 2})
    with pytest.raises(WeightFormatError):
        load_weights(p, other)


def test_kernels_deterministic():
    layer = _conv(3, 5, 3, "relu")
    x = np.random.default_rng(2).standard_normal((2, 8, 8, 3))
    assert np.array_equal(layer.forward(x), layer.forward(x.copy()))


def test_stateless_forward_matches_and_keeps_nothing():
    rng = np.random.default_rng(12)
    nodes = [Node("a", _conv(2, 3, 3, "relu", 1), ["x"]),
             Node("p", MaxPool2(), ["a"]),
             Node("u", Upsample2(), ["p"]),
             Node("cat", Concat(), ["a", "u", "y"]),
             Node("out", _conv(7, 1, 3, "sigmoid", 3), ["cat"])]
    g = ModelGraph(nodes, {"x": 2, "y": 1})
    feeds = {"x": rng.standard_normal((2, 6, 4, 2)), "y": rng.standard_normal((2, 6, 4, 1))}
    full = g.forward(feeds).copy()
    lean = g.forward(feeds, keep_state=False)
    assert np.array_equal(full, lean)
    assert g._outputs == {}
    assert all(getattr(layer, "_cache", None) is None for _, layer in g.layers())
    over = {"p": np.zeros((2, 3, 2, 3))}
    assert np.array_equal(g.forward(feeds, over), g.forward(feeds, over, keep_state=False))
    with pytest.raises(ShapeError):
        g.forward({"x": feeds["x"]}, keep_state=False)
