import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlife.novelty import (CalibratedThresholds, DegenerateLdaError, HypothesisConfig, LdaModel,
                           calibrate_sample_threshold, calibrate_vote_threshold, detection_rates, fisher_ratio,
                           fit_lda, misidentification_curve, novelty_score, projection_histogram,
                           select_vote_threshold, test_batch)


def gaussian_classes(seed=0, n=200, d=5, shift=1.0):
    rng = np.random.default_rng(seed)
    e1 = np.eye(d)[0]
    return rng.standard_normal((n, d)) + shift * e1, rng.standard_normal((n, d)) - shift * e1


def toy_lda(mu1=0.0, mu2=10.0, var=4.0):
    # identity standardization, one-dimensional direction
    return LdaModel(np.zeros(1), np.ones(1), np.ones(1), mu1, mu2, var)


# -- fit_lda ---------------------------------------------------------------------

def test_symmetric_classes_recover_the_separating_axis():
    a, b = gaussian_classes(n=2000)
    lda = fit_lda(a, b)
    assert abs(lda.direction[0]) >= 0.99


@pytest.mark.parametrize("seed", range(3))
def test_direction_beats_random_directions(seed):
    rng = np.random.default_rng(seed)
    cov = np.diag([1.0, 4.0, 0.5, 2.0])
    a = rng.multivariate_normal([0, 1, 0.5, 0], cov, 150)
    b = rng.multivariate_normal([1, 0, 0, 0.5], cov, 150)
    lda = fit_lda(a, b)
    sa, sb = lda.standardize(a), lda.standardize(b)
    best = fisher_ratio(lda.direction, sa, sb)
    dirs = rng.standard_normal((1000, 4))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert all(best >= fisher_ratio(v, sa, sb) - 1e-12 for v in dirs)


def test_identical_distributions_are_flagged_degenerate():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((500, 3))
    b = rng.standard_normal((500, 3))
    assert fit_lda(a, b).degenerate


def test_all_constant_features_raise():
    with pytest.raises(DegenerateLdaError):
        fit_lda(np.ones((5, 3)), np.ones((5, 3)) * 2)


def test_zero_variance_dimension_is_floored():
    a, b = gaussian_classes(n=100, d=3)
    a[:, 2] = b[:, 2] = 7.0
    lda = fit_lda(a, b)
    assert np.isfinite(lda.direction).all()
    assert np.isfinite(novelty_score(lda, a)).all()


def test_fit_needs_two_samples_per_class():
    with pytest.raises(ValueError):
        fit_lda(np.ones((1, 2)), np.zeros((3, 2)))


def test_pooled_variance_formula():
    a, b = gaussian_classes(seed=3, n=40, d=2)
    lda = fit_lda(a, b)
    pa, pb = lda.project(a), lda.project(b)
    expected = (39 * pa.var(ddof=1) + 39 * pb.var(ddof=1)) / 78
    assert lda.pooled_var == pytest.approx(expected)
    assert lda.mu1 == pytest.approx(pa.mean())


# -- scores ----------------------------------------------------------------------

def test_score_is_zero_at_projected_means():
    lda = toy_lda()
    assert novelty_score(lda, np.array([0.0])) == 0.0
    assert novelty_score(lda, np.array([10.0])) == 0.0


def test_two_sigma_from_nearest_mean_scores_four():
    lda = toy_lda(var=4.0)
    assert novelty_score(lda, np.array([0.0 + 2 * 2.0])) == pytest.approx(4.0)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_scores_are_non_negative(values):
    a, b = gaussian_classes(seed=2, n=30, d=1)
    lda = fit_lda(a, b)
    assert (np.atleast_1d(novelty_score(lda, np.array(values)[:, None])) >= 0).all()


def test_wrong_width_is_an_error():
    with pytest.raises(ValueError):
        novelty_score(toy_lda(), np.zeros((2, 3)))


# -- thresholds ------------------------------------------------------------------

def test_percentile_of_one_to_hundred():
    t = calibrate_sample_threshold(np.arange(1, 101), 95)
    assert 95 <= t <= 96


def test_percentile_of_constant_scores():
    assert calibrate_sample_threshold(np.full(30, 2.5), 95) == 2.5


@pytest.mark.parametrize("seed", range(5))
def test_percentile_matches_sort_and_index(seed):
    scores = np.random.default_rng(seed).exponential(size=57)
    q = 95.0
    s = sorted(scores)
    pos = q / 100 * (len(s) - 1)
    lo = int(pos)
    oracle = s[lo] + (pos - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])
    assert calibrate_sample_threshold(scores, q) == pytest.approx(oracle)


def test_percentile_of_nothing_is_an_error():
    with pytest.raises(ValueError):
        calibrate_sample_threshold(np.array([]))


def test_vote_threshold_from_injected_histogram():
    # 100 null batches: 12 with V = 3 and 2 with V = 4, rest V = 0
    votes = np.array([0] * 86 + [3] * 12 + [4] * 2)
    curve = misidentification_curve(votes, 20)
    assert curve[2] == pytest.approx(0.14)
    assert curve[3] == pytest.approx(0.02)
    # direct enumeration oracle for the selection rule
    oracle = min(t for t in range(21) if np.mean(votes > t) <= 0.05)
    assert select_vote_threshold(curve, 0.05) == (oracle, False) == (3, False)


def test_alpha_one_accepts_zero_votes():
    assert select_vote_threshold([0.9, 0.5, 0.0], 1.0) == (0, False)


def test_unreachable_alpha_flags_and_returns_n():
    assert select_vote_threshold([1.0, 1.0, 1.0], 0.05) == (2, True)


def test_invalid_hypothesis_config():
    with pytest.raises(ValueError):
        HypothesisConfig(alpha=0.0)
    with pytest.raises(ValueError):
        HypothesisConfig(null_mode="pooled")


@pytest.mark.parametrize("mode", ["mixed", "per-class"])
def test_calibrated_curve_is_monotone_and_vote_threshold_small(mode):
    a, b = gaussian_classes(seed=4, n=300, shift=4.0)
    lda = fit_lda(a, b)
    th = calibrate_vote_threshold(lda, [a, b], HypothesisConfig(null_mode=mode), seed=1)
    assert all(x >= y for x, y in zip(th.misid_curve, th.misid_curve[1:]))
    assert th.t_vote <= 5
    assert not th.flagged
    assert sum(th.vote_histogram) == 500


def test_pool_smaller_than_batch_is_an_error():
    a, b = gaussian_classes(n=5)
    with pytest.raises(ValueError):
        calibrate_vote_threshold(fit_lda(a, b), [a, b], HypothesisConfig(batch_size=20))


def test_thresholds_round_trip_through_dict():
    a, b = gaussian_classes(seed=5, n=50)
    lda = fit_lda(a, b)
    th = calibrate_vote_threshold(lda, [a, b], HypothesisConfig(num_null_trials=50))
    assert CalibratedThresholds.from_dict(th.to_dict()) == th
    lda2 = LdaModel.from_dict(lda.to_dict())
    np.testing.assert_array_equal(novelty_score(lda2, a), novelty_score(lda, a))


# -- batch decisions -----------------------------------------------------------

def calibrated(seed=6):
    a, b = gaussian_classes(seed=seed, n=300, shift=4.0)
    lda = fit_lda(a, b)
    return a, b, lda, calibrate_vote_threshold(lda, [a, b], seed=seed)


def test_batch_at_known_means_is_known():
    a, b, lda, th = calibrated()
    batch = np.repeat(a.mean(axis=0, keepdims=True), 20, axis=0)
    decision = test_batch(lda, th, batch)
    assert decision.verdict == "known"
    assert decision.votes <= th.t_vote


def test_batch_of_extreme_samples_is_new():
    a, b, lda, th = calibrated()
    far = np.zeros((20, 5))
    far[:, 0] = 40.0
    decision = test_batch(lda, th, far)
    assert decision.votes == 20
    assert decision.verdict == "new-class"
    assert len(decision.scores) == 20


def test_wrong_batch_size_is_an_error():
    a, b, lda, th = calibrated()
    with pytest.raises(ValueError):
        test_batch(lda, th, a[:19])


def test_held_out_third_class_is_detected():
    rng = np.random.default_rng(7)
    a, b, lda, th = calibrated()
    # a third grade lying beyond one end of the known axis
    third = rng.standard_normal((300, 5))
    third[:, 0] += 12.0
    ka, kb = rng.standard_normal((300, 5)), rng.standard_normal((300, 5))
    ka[:, 0] += 4.0
    kb[:, 0] -= 4.0
    rates = detection_rates(lda, th, {"new": third, "a": ka, "b": kb}, trials=100, seed=1)
    assert rates["new"] >= 0.95
    assert rates["a"] <= th.alpha + 0.03 and rates["b"] <= th.alpha + 0.03


@given(scale=st.floats(0.1, 10.0), offset=st.floats(-50, 50), seed=st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_verdicts_invariant_to_increasing_affine_maps(scale, offset, seed):
    rng = np.random.default_rng(seed)
    a, b = gaussian_classes(seed=seed, n=120, shift=2.0)
    batches = [rng.standard_normal((20, 5)) + rng.uniform(-6, 6, 5) for _ in range(6)]

    def verdicts(f):
        lda = fit_lda(f(a), f(b))
        th = calibrate_vote_threshold(lda, [f(a), f(b)], seed=seed)
        return [test_batch(lda, th, f(x)).verdict for x in batches]

    assert verdicts(lambda x: x) == verdicts(lambda x: scale * x + offset)


def test_projection_histogram_shares_bins():
    a, b = gaussian_classes(n=50)
    rows = projection_histogram(fit_lda(a, b), {"good": a, "damaged": b}, bins=10)
    assert len(rows) == 20
    assert sum(r["count"] for r in rows if r["class"] == "good") == 50
    centers = {r["class"]: [x["bin_center"] for x in rows if x["class"] == r["class"]] for r in rows}
    assert centers["good"] == centers["damaged"]
