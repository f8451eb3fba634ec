import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlife.engine import (SGD, AdaptiveAvgPool2d, BackwardError, BatchNorm1d, Conv2d, Dense, Dropout, GradReverse,
                          ReLU, Sequential, ShapeError, SpatialPyramidPool, adaptive_avg_pool, backward, bin_edges,
                          cross_entropy, forward, make_optimizer, numerical_gradient, params_digest, relative_error,
                          sgd_step, softmax)
from qlife.engine.gradcheck import check_layer


def _away_from_zero(x, margin=0.05):
    return x + np.sign(x) * margin


# -- forward -----------------------------------------------------------------

def test_relu_forward_definition():
    out = forward(Sequential([ReLU()]), np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])


def test_identity_dense_passes_input_through():
    layer = Dense(4, 4)
    layer.params["weight"] = np.eye(4, dtype=np.float32)
    layer.params["bias"][:] = 0
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(layer.forward(x), x)


def test_two_layer_dense_matches_naive_matmul():
    rng = np.random.default_rng(7)
    net = Sequential([Dense(3, 4, rng=rng), Dense(4, 2, rng=rng)])
    x = rng.standard_normal((2, 3)).astype(np.float32)
    w1, b1 = net[0].params["weight"], net[0].params["bias"]
    w2, b2 = net[1].params["weight"], net[1].params["bias"]

    def naive(a, w, b):
        return [[sum(float(a[i][k]) * float(w[j][k]) for k in range(len(a[i]))) + float(b[j])
                 for j in range(len(w))] for i in range(len(a))]

    expected = naive(naive(x, w1, b1), w2, b2)
    np.testing.assert_allclose(forward(net, x), expected, rtol=1e-5, atol=1e-6)


def test_shape_mismatch_names_layer():
    net = Sequential([Dense(3, 4), ReLU(), Dense(5, 2)])
    with pytest.raises(ShapeError, match=r"layer 2 \(dense\)"):
        net.forward(np.zeros((1, 3), np.float32))


def test_non_finite_activation_is_an_error():
    net = Sequential([Dense(2, 2)])
    with pytest.raises(FloatingPointError):
        net.forward(np.array([[np.inf, 0.0]], np.float32))


# -- backward ----------------------------------------------------------------

def test_sum_loss_through_identity_dense_gives_outer_product():
    layer = Dense(3, 2)
    layer.params["weight"] = np.eye(2, 3, dtype=np.float64)
    x = np.array([[1.0, 2.0, 3.0]])
    layer.forward(x, train=True)
    layer.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(layer.grads["weight"], np.outer(np.ones(2), x[0]))
    np.testing.assert_array_equal(layer.grads["bias"], [1.0, 1.0])


def test_backward_without_forward_raises():
    net = Sequential([Dense(2, 2)])
    with pytest.raises(BackwardError):
        backward(net, np.ones((1, 2)))


def test_eval_forward_leaves_nothing_for_backward():
    layer = Dense(2, 2)
    layer.forward(np.ones((1, 2), np.float32), train=False)
    with pytest.raises(BackwardError):
        layer.backward(np.ones((1, 2)))


def test_dropout_eval_gradient_is_unscaled():
    d = Dropout(0.5)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(d.forward(x, train=False), x)
    g = np.full((2, 3), 2.0)
    np.testing.assert_array_equal(d.backward(g), g)


def test_dropout_train_is_inverted():
    d = Dropout(0.25, seed=3)
    out = d.forward(np.ones((1000, 50)), train=True)
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kind", ["dense", "conv", "relu", "dropout", "batchnorm", "pool", "spp"])
def test_layer_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "dense":
        layer, x = Dense(5, 3, rng=rng), rng.standard_normal((4, 5))
    elif kind == "conv":
        layer, x = Conv2d(2, 3, 3, stride=2, padding=1, rng=rng), rng.standard_normal((2, 2, 7, 6))
    elif kind == "relu":
        layer, x = ReLU(), _away_from_zero(rng.standard_normal((3, 6)))
    elif kind == "dropout":
        layer, x = Dropout(0.5), rng.standard_normal((4, 5))
    elif kind == "batchnorm":
        layer, x = BatchNorm1d(4), rng.standard_normal((6, 4))
        layer.params["gamma"] = rng.uniform(0.5, 1.5, 4)
    elif kind == "pool":
        layer, x = AdaptiveAvgPool2d((2, 3)), rng.standard_normal((2, 3, 5, 7))
    else:
        layer, x = SpatialPyramidPool((4, 2, 1)), rng.standard_normal((2, 3, 9, 8))

    def reseed_dropout():
        # the probe needs the same dropout mask on every forward pass
        layer.rng = np.random.default_rng(seed)

    errors = check_layer(layer, x, rng, before_forward=reseed_dropout if kind == "dropout" else None)
    assert max(errors.values()) <= 1e-3, errors


def test_grad_reverse_flips_and_scales():
    layer = GradReverse(1.0)
    x = np.array([3.5, -1.0])
    assert layer.forward(x, train=True) is x
    np.testing.assert_array_equal(layer.backward(np.array([1.0, 2.0])), [-1.0, -2.0])
    zero = GradReverse(0.0)
    zero.forward(x, train=True)
    np.testing.assert_array_equal(zero.backward(np.array([1.0, 2.0])), [0.0, 0.0])


def test_grad_reverse_rejects_negative_scale():
    with pytest.raises(ValueError):
        GradReverse(-0.1)


# -- cross entropy -------------------------------------------------------------

def test_cross_entropy_uniform_logits_is_log_k():
    loss, _ = cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert loss == pytest.approx(np.log(3))


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, _ = cross_entropy(logits, np.array([0]))
    assert loss < 1e-12


def test_cross_entropy_matches_naive_logsumexp():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((2, 3))
    labels = np.array([2, 0])
    naive = np.mean([np.log(sum(np.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    loss, grad = cross_entropy(logits, labels)
    assert loss == pytest.approx(naive, rel=1e-12)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(grad, (softmax(logits) - onehot) / 2)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    _, g = cross_entropy(logits, labels)
    num = numerical_gradient(lambda: cross_entropy(logits, labels)[0], logits)
    assert relative_error(g, num) <= 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([-1]))


def test_softmax_is_stable_for_large_logits():
    p = softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5]])


# -- pooling -----------------------------------------------------------------

def test_bin_edges_cover_and_overlap_by_rule():
    assert bin_edges(5, 2) == [(0, 3), (2, 5)]
    assert bin_edges(4, 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]


@given(h=st.integers(1, 20), w=st.integers(1, 20), bh=st.integers(1, 6), bw=st.integers(1, 6),
       c=st.floats(-5, 5, allow_nan=False))
@settings(max_examples=60, deadline=None)
def test_adaptive_pool_of_constant_is_constant(h, w, bh, bw, c):
    x = np.full((1, 2, h, w), c)
    out = adaptive_avg_pool(x, (bh, bw))
    assert out.shape == (1, 2, bh, bw)
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-12)


def test_global_bin_is_global_mean():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
    assert adaptive_avg_pool(x, (1, 1))[0, 0, 0, 0] == pytest.approx(x.mean())


def test_ramp_pool_matches_region_enumeration():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = adaptive_avg_pool(x, (2, 2))
    for i in range(2):
        for j in range(2):
            r0, r1 = int(np.floor(i * 5 / 2)), int(np.ceil((i + 1) * 5 / 2))
            c0, c1 = int(np.floor(j * 5 / 2)), int(np.ceil((j + 1) * 5 / 2))
            vals = [x[0, 0, a, b] for a in range(r0, r1) for b in range(c0, c1)]
            assert out[0, 0, i, j] == pytest.approx(sum(vals) / len(vals))


def test_zero_bins_rejected():
    with pytest.raises(ValueError):
        AdaptiveAvgPool2d((0, 2))


@given(h=st.integers(7, 64), w=st.integers(7, 64))
@settings(max_examples=40, deadline=None)
def test_spp_vector_count_independent_of_size(h, w):
    spp = SpatialPyramidPool((4, 2, 1))
    x = np.random.default_rng(h * 100 + w).standard_normal((1, 3, h, w)).astype(np.float32)
    assert spp.pooled_vectors(x).shape == (1, 21, 3)
    assert spp.forward(x).shape == (1, 63)


# -- batchnorm -----------------------------------------------------------------

def test_batchnorm_normalized_activations_are_standard():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 5.0, size=(64, 8))
    xhat = BatchNorm1d(8).normalize(x)
    assert np.abs(xhat.mean(axis=0)).max() < 1e-5
    assert np.abs(xhat.var(axis=0) - 1).max() < 1e-4


def test_batchnorm_eval_is_deterministic_and_pure():
    bn = BatchNorm1d(3)
    rng = np.random.default_rng(0)
    bn.forward(rng.standard_normal((10, 3)), train=True)
    before = {k: v.copy() for k, v in bn.buffers.items()}
    x = rng.standard_normal((4, 3))
    a, b = bn.forward(x), bn.forward(x)
    np.testing.assert_array_equal(a, b)
    for k in before:
        np.testing.assert_array_equal(bn.buffers[k], before[k])


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ShapeError):
        BatchNorm1d(3).forward(np.zeros((1, 3)), train=True)


# -- optimisers ----------------------------------------------------------------

def test_sgd_single_step_definition():
    p = np.array([1.0])
    sgd_step([p], [np.array([1.0])], lr=0.1)
    assert p[0] == pytest.approx(0.9)


def test_sgd_zero_gradient_keeps_parameters():
    p = np.array([1.0, -2.0])
    sgd_step([p], [np.zeros(2)], lr=0.5, momentum=0.9)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_sgd_momentum_matches_geometric_series():
    p, g, lr, m = np.array([0.0]), np.array([1.0]), 0.1, 0.9
    vel = None
    for _ in range(3):
        vel = sgd_step([p], [g], lr=lr, momentum=m, velocity=vel)
    # v_t = sum_{i<t} m^i, so p = -lr * sum_t v_t
    expected = -lr * sum(sum(m ** i for i in range(t)) for t in range(1, 4))
    assert p[0] == pytest.approx(expected)


def test_sgd_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError):
        sgd_step([np.zeros(1)], [np.array([np.nan])], lr=0.1)


def test_optimizer_step_keeps_shapes():
    rng = np.random.default_rng(0)
    net = Sequential([Dense(3, 4, rng=rng), ReLU(), Dense(4, 2, rng=rng)])
    shapes = [net[i].params[n].shape for i in (0, 2) for n in ("weight", "bias")]
    for name in ("sgd", "adam"):
        opt = make_optimizer(name, list(net.parameters()), lr=0.01)
        net.forward(rng.standard_normal((5, 3)).astype(np.float32), train=True)
        net.backward(np.ones((5, 2), np.float32))
        opt.step()
        assert [net[i].params[n].shape for i in (0, 2) for n in ("weight", "bias")] == shapes


def test_layer_sgd_matches_functional_sgd():
    layer = Dense(2, 1)
    w0 = layer.params["weight"].copy()
    layer.grads["weight"][...] = 0.5
    SGD([(layer, "weight")], lr=0.2, momentum=0.0).step()
    np.testing.assert_allclose(layer.params["weight"], w0 - 0.1)


def test_identical_seed_gives_identical_trajectory():
    def run():
        rng = np.random.default_rng(5)
        net = Sequential([Dense(4, 8, rng=rng), ReLU(), Dropout(0.5, seed=1), Dense(8, 3, rng=rng)])
        opt = make_optimizer("sgd", list(net.parameters()), lr=0.05)
        data = np.random.default_rng(9)
        for _ in range(5):
            x = data.standard_normal((6, 4)).astype(np.float32)
            y = data.integers(0, 3, 6)
            _, g = cross_entropy(net.forward(x, train=True), y)
            net.backward(g)
            opt.step()
            opt.zero_grad()
        return params_digest(net)

    assert run() == run()


def test_state_dict_roundtrip():
    rng = np.random.default_rng(1)
    net = Sequential([Dense(3, 4, rng=rng), BatchNorm1d(4)])
    net.forward(rng.standard_normal((5, 3)).astype(np.float32), train=True)
    other = Sequential([Dense(3, 4), BatchNorm1d(4)])
    other.load_state_dict(net.state_dict())
    x = rng.standard_normal((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x), other.forward(x))
