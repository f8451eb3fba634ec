"""Batch-level new-class detection on a one-dimensional Fisher projection.

Embeddings of the two known classes are standardised and projected onto the
two-class Fisher direction. A sample's novelty score is its squared distance
to the nearer projected class mean in units of the pooled variance. A batch
is flagged as a new class when more than ``T_vote`` of its samples score above
``T_sample``, with ``T_vote`` chosen from a simulated null distribution of
vote counts so that known batches are flagged at most ``alpha`` of the time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STD_FLOOR = 1e-8
RIDGE = 1e-6


class DegenerateLdaError(ValueError):
    pass


@dataclass(frozen=True)
class LdaModel:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    direction: np.ndarray
    mu1: float
    mu2: float
    pooled_var: float
    degenerate: bool = False

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.direction.size:
            raise ValueError(f"expected embeddings of width {self.direction.size}, got {x.shape}")
        return (x - self.feature_mean) / self.feature_std

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.standardize(x) @ self.direction

    def to_dict(self) -> dict:
        return {"feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
                "direction": self.direction.tolist(), "mu1": self.mu1, "mu2": self.mu2,
                "pooled_var": self.pooled_var, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "LdaModel":
        return cls(np.array(d["feature_mean"]), np.array(d["feature_std"]), np.array(d["direction"]),
                   float(d["mu1"]), float(d["mu2"]), float(d["pooled_var"]), bool(d.get("degenerate", False)))


@dataclass
class HypothesisConfig:
    batch_size: int = 20
    percentile: float = 95.0
    alpha: float = 0.05
    num_null_trials: int = 500
    null_mode: str = "mixed"  # or "per-class"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must be within [0, 100]")
        if self.num_null_trials < 1:
            raise ValueError("num_null_trials must be >= 1")
        if self.null_mode not in ("mixed", "per-class"):
            raise ValueError(f"null_mode must be 'mixed' or 'per-class', got {self.null_mode!r}")


@dataclass
class CalibratedThresholds:
    t_sample: float
    t_vote: int
    batch_size: int
    alpha: float
    vote_histogram: list[int]
    misid_curve: list[float]
    flagged: bool = False
    per_class_curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t_sample": self.t_sample, "t_vote": self.t_vote, "batch_size": self.batch_size,
                "alpha": self.alpha, "vote_histogram": self.vote_histogram, "misid_curve": self.misid_curve,
                "flagged": self.flagged, "per_class_curves": self.per_class_curves}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedThresholds":
        return cls(float(d["t_sample"]), int(d["t_vote"]), int(d["batch_size"]), float(d["alpha"]),
                   list(d["vote_histogram"]), list(d["misid_curve"]), bool(d.get("flagged", False)),
                   dict(d.get("per_class_curves", {})))


@dataclass
class BatchDecision:
    votes: int
    verdict: str
    scores: list[float]

    def to_dict(self):
        return {"votes": self.votes, "verdict": self.verdict, "scores": self.scores}


def fisher_ratio(direction: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Between-class over within-class spread of two sample sets along ``direction``."""
    pa, pb = a @ direction, b @ direction
    within = ((pa - pa.mean()) ** 2).sum() + ((pb - pb.mean()) ** 2).sum()
    return float((pa.mean() - pb.mean()) ** 2 / within)


def fit_lda(class1: np.ndarray, class2: np.ndarray, min_separation: float = 0.5, ridge: float = RIDGE) -> LdaModel:
    """Two-class Fisher discriminant on z-scored features.

    The within-class scatter gets a small ridge (``1e-6 * trace / d``) so
    small-sample fits stay solvable. ``degenerate`` is set when the projected
    means sit less than ``min_separation`` pooled standard deviations apart.
    """
    a = np.asarray(class1, dtype=np.float64)
    b = np.asarray(class2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"class feature arrays must be (n, d) with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each known class needs at least 2 samples")
    both = np.concatenate([a, b])
    mean = both.mean(axis=0)
    std = np.maximum(both.std(axis=0), STD_FLOOR)
    sa, sb = (a - mean) / std, (b - mean) / std
    ma, mb = sa.mean(axis=0), sb.mean(axis=0)
    ca, cb = sa - ma, sb - mb
    sw = ca.T @ ca + cb.T @ cb
    d = sw.shape[0]
    tr = np.trace(sw)
    if not np.isfinite(tr) or tr <= 0:
        raise DegenerateLdaError("within-class scatter is zero; every feature is constant within classes")
    sw[np.diag_indices(d)] += ridge * tr / d
    try:
        w = np.linalg.solve(sw, ma - mb)
    except np.linalg.LinAlgError as exc:
        raise DegenerateLdaError(f"within-class scatter is singular: {exc}") from None
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm == 0:
        raise DegenerateLdaError("class means coincide; no discriminant direction")
    w /= norm
    pa, pb = sa @ w, sb @ w
    na, nb = len(a), len(b)
    pooled = ((na - 1) * pa.var(ddof=1) + (nb - 1) * pb.var(ddof=1)) / (na + nb - 2)
    if pooled <= 0:
        raise DegenerateLdaError("projected pooled variance is zero")
    mu1, mu2 = float(pa.mean()), float(pb.mean())
    degenerate = abs(mu1 - mu2) / np.sqrt(pooled) < min_separation
    return LdaModel(mean, std, w, mu1, mu2, float(pooled), bool(degenerate))


def novelty_score(lda: LdaModel, x: np.ndarray) -> np.ndarray | float:
    """Squared distance to the nearer projected class mean over the pooled variance."""
    p = lda.project(x)
    s = np.minimum((p - lda.mu1) ** 2, (p - lda.mu2) ** 2) / lda.pooled_var
    return float(s) if np.ndim(s) == 0 else s


def calibrate_sample_threshold(scores: np.ndarray, percentile: float = 95.0) -> float:
    """Linear-interpolation percentile of known-class novelty scores."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("no scores to calibrate against")
    return float(np.percentile(scores, percentile, method="linear"))


def misidentification_curve(null_votes: np.ndarray, batch_size: int) -> np.ndarray:
    """Empirical ``P(V > t)`` for ``t = 0..batch_size``."""
    v = np.asarray(null_votes)
    return np.array([np.mean(v > t) for t in range(batch_size + 1)])


def select_vote_threshold(curve, alpha: float) -> tuple[int, bool]:
    """Smallest ``t`` whose false-flag rate is ``<= alpha``; ``(len-1, True)`` if none is."""
    for t, rate in enumerate(curve):
        if rate <= alpha:
            return t, False
    return len(curve) - 1, True


def _simulate_votes(scores: np.ndarray, t_sample: float, n: int, trials: int, rng) -> np.ndarray:
    draws = rng.integers(0, len(scores), size=(trials, n))
    return (scores[draws] > t_sample).sum(axis=1)


def calibrate_vote_threshold(lda: LdaModel, known_features, config: HypothesisConfig | None = None,
                             seed: int = 0) -> CalibratedThresholds:
    """Fit ``T_sample`` on all known samples, then ``T_vote`` on simulated known-only batches.

    ``known_features`` is a sequence of per-class ``(n, d)`` arrays. In
    ``mixed`` mode each null batch draws uniformly (with replacement) from the
    pooled known samples; in ``per-class`` mode the threshold must control the
    false-flag rate for every class separately.
    """
    cfg = config or HypothesisConfig()
    per_class = [np.asarray(f) for f in known_features]
    scores_by_class = [np.atleast_1d(novelty_score(lda, f)) for f in per_class]
    pooled = np.concatenate(scores_by_class)
    if pooled.size < cfg.batch_size:
        raise ValueError(f"known pool has {pooled.size} samples, fewer than batch size {cfg.batch_size}")
    t_sample = calibrate_sample_threshold(pooled, cfg.percentile)
    rng = np.random.default_rng(seed)
    n = cfg.batch_size
    votes = _simulate_votes(pooled, t_sample, n, cfg.num_null_trials, rng)
    curve = misidentification_curve(votes, n)
    class_curves = {}
    for i, s in enumerate(scores_by_class):
        v = _simulate_votes(s, t_sample, n, cfg.num_null_trials, rng)
        class_curves[str(i)] = misidentification_curve(v, n).tolist()
    if cfg.null_mode == "per-class":
        curve = np.max([class_curves[k] for k in class_curves], axis=0)
    t_vote, flagged = select_vote_threshold(curve, cfg.alpha)
    hist = np.bincount(votes, minlength=n + 1)
    return CalibratedThresholds(t_sample, t_vote, n, cfg.alpha, hist.tolist(), curve.tolist(), flagged, class_curves)


def test_batch(lda: LdaModel, thresholds: CalibratedThresholds, batch: np.ndarray) -> BatchDecision:
    batch = np.asarray(batch)
    if batch.ndim != 2 or len(batch) != thresholds.batch_size:
        raise ValueError(f"batch must hold exactly {thresholds.batch_size} embeddings, got shape {batch.shape}")
    scores = np.atleast_1d(novelty_score(lda, batch))
    votes = int((scores > thresholds.t_sample).sum())
    verdict = "new-class" if votes > thresholds.t_vote else "known"
    return BatchDecision(votes, verdict, scores.tolist())


test_batch.__test__ = False  # not a pytest test


def detection_rates(lda: LdaModel, thresholds: CalibratedThresholds, pools: dict[str, np.ndarray],
                    trials: int = 100, seed: int = 0) -> dict[str, float]:
    """Fraction of random batches from each pool that get flagged as new."""
    rng = np.random.default_rng(seed)
    n = thresholds.batch_size
    out = {}
    for name, feats in pools.items():
        feats = np.asarray(feats)
        if len(feats) == 0:
            continue
        flagged = 0
        for _ in range(trials):
            idx = rng.integers(0, len(feats), n)
            flagged += test_batch(lda, thresholds, feats[idx]).verdict == "new-class"
        out[name] = flagged / trials
    return out


def projection_histogram(lda: LdaModel, features: dict[str, np.ndarray], bins: int = 40) -> list[dict]:
    """Rows ``{bin_center, count, class}`` on a shared set of bins along the discriminant axis."""
    proj = {k: lda.project(np.asarray(v)) for k, v in features.items() if len(v)}
    allp = np.concatenate(list(proj.values()))
    edges = np.linspace(allp.min(), allp.max(), bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    for name, p in proj.items():
        counts, _ = np.histogram(p, edges)
        rows += [{"bin_center": float(c), "count": int(k), "class": name} for c, k in zip(centers, counts)]
    return rows
