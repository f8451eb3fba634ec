import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlife.data import Dataset, DatasetError, SyntheticSpec, generate, rescale, split
from qlife.model import (BackboneConfig, QualityModel, TrainConfig, confusion_matrix, cosine, embed, evaluate, fit,
                         metrics_from_confusion, predict, scl_loss, total_loss, train_baseline)
from qlife.engine import numerical_gradient, relative_error


def small_model(embed_dim=16, num_classes=2, seed=0, **kw):
    return QualityModel(BackboneConfig(embed_dim=embed_dim, num_classes=num_classes, **kw), seed=seed)


# -- structure and embed -------------------------------------------------------

def test_spp_width_for_eight_channels():
    assert BackboneConfig(conv_channels=(8,), spp_levels=(4, 2, 1)).spp_width == 168
    model = QualityModel(BackboneConfig(conv_channels=(8,), embed_dim=4))
    x = np.random.default_rng(0).random((2, 1, 20, 20), dtype=np.float32)
    assert model.spp_features(x).shape == (2, 168)


@pytest.mark.parametrize("embed_dim", [16, 512])
def test_embedding_length_matches_config(embed_dim):
    model = small_model(embed_dim)
    img = np.random.default_rng(1).random((1, 32, 32), dtype=np.float32)
    assert embed(model, img).shape == (embed_dim,)
    assert embed(model, img[None].repeat(3, 0)).shape == (3, embed_dim)


def test_zero_image_through_zero_conv_gives_zero_spp():
    model = small_model()
    for layer in model.extractor:
        for name in getattr(layer, "params", {}):
            layer.params[name][...] = 0.0
    out = model.spp_features(np.zeros((2, 1, 24, 24), np.float32))
    assert out.shape == (2, model.config.spp_width)
    assert not out.any()


def test_eval_embedding_is_deterministic():
    model = small_model()
    x = np.random.default_rng(2).random((4, 1, 32, 32), dtype=np.float32)
    np.testing.assert_array_equal(embed(model, x), embed(model, x))


def test_embed_rejects_wrong_channel_count():
    model = small_model()
    with pytest.raises(Exception, match="layer 0"):
        embed(model, np.zeros((2, 3, 32, 32), np.float32))


def test_invalid_backbone_config_rejected():
    with pytest.raises(ValueError):
        BackboneConfig(spp_levels=())
    with pytest.raises(ValueError):
        BackboneConfig(spp_levels=(4, 0))
    with pytest.raises(ValueError):
        BackboneConfig(embed_dim=0)


def test_precomputed_mode_bypasses_extractor():
    model = QualityModel(BackboneConfig(precomputed_dim=10, embed_dim=8))
    z = embed(model, np.ones((3, 10), np.float32))
    assert z.shape == (3, 8)
    with pytest.raises(DatasetError):
        embed(model, np.ones((3, 11), np.float32))


# -- scale consistency loss ------------------------------------------------------

def test_scl_identical_inputs_is_zero():
    z = np.array([0.3, -1.2, 2.0])
    assert scl_loss(z, z)[0] == pytest.approx(0.0, abs=1e-12)


def test_scl_is_scale_invariant_example():
    z = np.array([0.3, -1.2, 2.0])
    assert scl_loss(z, 3 * z)[0] == pytest.approx(0.0, abs=1e-12)


def test_scl_orthogonal_unit_vectors():
    assert scl_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))[0] == pytest.approx(1.0)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=12),
       st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_scl_scale_invariance_property(values, c):
    z = np.array(values)
    if np.linalg.norm(z) < 1e-3:
        return
    assert scl_loss(z, c * z)[0] <= 1e-6


def test_scl_zero_norm_is_an_error():
    with pytest.raises(FloatingPointError):
        scl_loss(np.zeros(3), np.ones(3))


def test_scl_gradient_flows_through_normalisation():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    _, ga, gb = scl_loss(a, b)
    assert relative_error(ga, numerical_gradient(lambda: scl_loss(a, b)[0], a)) < 1e-6
    assert relative_error(gb, numerical_gradient(lambda: scl_loss(a, b)[0], b)) < 1e-6


def test_total_loss_arithmetic():
    assert total_loss(0.7, 0.2, 0.1) == pytest.approx(0.72)
    assert total_loss(0.7, 0.2, 0.0) == pytest.approx(0.7)


# -- training --------------------------------------------------------------------

def blobs(n=60, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.standard_normal((n, dim)).astype(np.float32) * 0.5
    x[:, 0] += np.where(y == 1, 2.0, -2.0)
    return x, y


def test_separable_blobs_reach_full_train_accuracy():
    x, y = blobs()
    model = QualityModel(BackboneConfig(precomputed_dim=6, embed_dim=16, dropout_rate=0.0))
    hist = fit(model, x, y, TrainConfig(epochs=30, batch_size=16, lr=0.05))
    assert hist[-1]["train_accuracy"] >= 0.99
    assert np.mean([h["loss"] for h in hist[-3:]]) < hist[0]["loss"]
    assert (predict(model, x) == y).mean() >= 0.99


def test_zero_scl_weight_reduces_to_cross_entropy():
    x, y = blobs(20)
    model = QualityModel(BackboneConfig(precomputed_dim=6, embed_dim=8))
    hist = fit(model, x, y, TrainConfig(epochs=2, batch_size=10, scl_weight=0.0))
    assert all(h["loss"] == pytest.approx(h["ce"]) for h in hist)


def test_dual_view_history_records_scl():
    ds = generate(SyntheticSpec.scaled(0.02, minimum=4, image_size=24))
    known = ds.subset(ds.where(domain="source", classes=["good", "damaged"]))
    model = QualityModel(BackboneConfig(embed_dim=8), ["good", "damaged"])
    _, hist = train_baseline(model, known, TrainConfig(epochs=2, batch_size=8))
    assert len(hist) == 2
    assert all(h["scl"] > 0 for h in hist)
    assert all(h["loss"] == pytest.approx(h["ce"] + 0.1 * h["scl"]) for h in hist)


def test_train_baseline_needs_two_classes():
    ds = generate(SyntheticSpec.scaled(0.01, minimum=3, image_size=16))
    one = ds.subset(ds.where(classes=["good"]))
    with pytest.raises(DatasetError):
        train_baseline(QualityModel(BackboneConfig(embed_dim=4), ["good", "damaged"]), one)


# -- evaluate ----------------------------------------------------------------------

def test_constant_predictor_on_balanced_set_scores_half():
    cm = confusion_matrix(np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0]), 2)
    assert metrics_from_confusion(cm, ["good", "damaged"])["accuracy"] == 0.5


def test_perfect_predictor_gives_diagonal_confusion():
    y = np.array([0, 1, 2, 2, 1])
    cm = confusion_matrix(y, y, 3)
    assert (cm == np.diag(np.diag(cm))).all()
    assert metrics_from_confusion(cm, ["a", "b", "c"])["accuracy"] == 1.0


def test_evaluate_matches_per_sample_recount():
    ds = generate(SyntheticSpec.scaled(0.02, minimum=4, image_size=24))
    model = QualityModel(BackboneConfig(embed_dim=8, num_classes=3), seed=5)
    report = evaluate(model, ds)
    cm = [[0] * 3 for _ in range(3)]
    hits = 0
    for i in range(len(ds)):
        logits = model.logits(ds.x[i:i + 1])[0]
        pred = int(np.argmax(logits))
        cm[int(ds.y[i])][pred] += 1
        hits += pred == int(ds.y[i])
    assert report["confusion_matrix"] == cm
    assert report["accuracy"] == pytest.approx(hits / len(ds))


def test_evaluate_empty_dataset_is_an_error():
    model = small_model()
    empty = Dataset(np.zeros((0, 1, 32, 32), np.float32), np.zeros(0), np.zeros(0), [])
    with pytest.raises(DatasetError):
        evaluate(model, empty)


@pytest.mark.slow
def test_rescaled_views_stay_closer_than_other_classes():
    ds = generate(SyntheticSpec.scaled(0.25, minimum=10, image_size=32, seed=3))
    src = ds.subset(ds.where(domain="source", classes=["good", "damaged"]))
    sp = split(src, (0.7, 0.0, 0.3), seed=0)
    model = QualityModel(BackboneConfig(embed_dim=32), ["good", "damaged"])
    train_baseline(model, src.subset(sp.train), TrainConfig(epochs=10, optimizer="adam", lr=3e-3))
    test = src.subset(sp.test)
    z = embed(model, test.x)
    z_scaled = embed(model, rescale(test.x, 1.5))
    same = cosine(z, z_scaled).mean()
    rng = np.random.default_rng(0)
    a = np.flatnonzero(test.y == 0)
    b = np.flatnonzero(test.y == 2)
    pairs = rng.choice(a, 200), rng.choice(b, 200)
    other = cosine(z[pairs[0]], z[pairs[1]]).mean()
    assert same > other
