"""Few-shot domain-adversarial adaptation.

A source-trained three-class model is extended with a domain classifier that
reads the same embedding through a gradient reversal layer. Training
minimises ``L_src + w * L_tgt`` for the class head while the domain head
learns to tell source from target and the reversed gradient pushes the
shared backbone towards embeddings the domain head cannot separate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score

from .data import CLASSES, DOMAINS, AugmentConfig, Dataset, DatasetError, augment_batch
from .engine import Dense, GradReverse, ReLU, Sequential, cross_entropy, make_optimizer
from .model import QualityModel, TrainConfig, embed, evaluate, fit

log = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1


@dataclass
class DannConfig:
    epochs: int = 30
    batch_size: int = 16  # source sub-batch; the target sub-batch has the same size
    lr: float = 1e-3
    optimizer: str = "adam"
    lambda_grl: float = 1.0
    ramp: bool = False  # sigmoid ramp of lambda from 0 to lambda_grl
    schedule: str = "cosine"  # or "constant"
    w_target: float = 0.5
    domain_hidden: int = 64
    domain_lr_scale: float = 10.0  # learning-rate multiplier for the domain head
    # few-shot labelled target samples also count as target examples in the domain loss
    domain_on_labeled_target: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.lambda_grl < 0:
            raise ValueError("lambda_grl must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class FewShotTargetSet:
    """``k`` labelled target samples per class, drawn from the target training pool."""

    k: int
    dataset: Dataset
    indices: np.ndarray


class DannModel:
    """Shared backbone with a class head and a gradient-reversed domain head on one embedding."""

    def __init__(self, base: QualityModel, lambda_grl: float = 1.0, w_target: float = 0.5,
                 domain_hidden: int = 64, seed: int = 0):
        if lambda_grl < 0:
            raise ValueError("lambda_grl must be non-negative")
        self.model = base
        self.w_target = float(w_target)
        rng = np.random.default_rng(seed)
        dim = base.config.embed_dim
        self.grl = GradReverse(lambda_grl)
        self.domain_head = Sequential([self.grl, Dense(dim, domain_hidden, rng=rng), ReLU(),
                                       Dense(domain_hidden, 2, rng=rng)])

    @property
    def lambda_grl(self) -> float:
        return self.grl.scale

    @lambda_grl.setter
    def lambda_grl(self, value: float):
        if value < 0:
            raise ValueError("lambda_grl must be non-negative")
        self.grl.scale = float(value)

    def parameters(self):
        return self.model.parameters() + list(self.domain_head.parameters())

    def zero_grad(self):
        self.model.zero_grad()
        self.domain_head.zero_grad()


def grl(x: np.ndarray, lambda_grl: float = 1.0):
    """Functional gradient reversal: returns ``(x, backward)`` where ``backward(g) = -lambda * g``."""
    layer = GradReverse(lambda_grl)
    out = layer.forward(x, train=True)
    return out, layer.backward


def sigmoid_ramp(progress: float, gamma: float = 10.0) -> float:
    """``2 / (1 + exp(-gamma * p)) - 1``, going from 0 at ``p=0`` to almost 1 at ``p=1``."""
    return float(2.0 / (1.0 + np.exp(-gamma * progress)) - 1.0)


def dann_losses(dm: DannModel, xs, ys, xt, yt, xu, train: bool = True, backward: bool = True,
                domain_on_labeled_target: bool = True) -> dict:
    """Forward (and optionally backward) pass of the composite objective on one batch.

    All inputs go through the backbone together. Gradients are accumulated
    into the layers: the class head and backbone receive
    ``d(L_src + w * L_tgt)``, the domain head receives ``d L_dom`` and the
    backbone receives ``-lambda * d L_dom`` through the reversal layer.
    Returns the four loss values.
    """
    m = dm.model
    parts = [xs, xt] + ([xu] if xu is not None and len(xu) else [])
    sizes = [len(p) for p in parts]
    if sizes[0] == 0 or sizes[1] == 0:
        raise DatasetError("source and labelled target batches must be non-empty")
    x = np.concatenate(parts)
    ns, nt = sizes[0], sizes[1]
    z = m.embed_batch(x, train=train)
    logits = m.classifier.forward(z[: ns + nt], train=True)
    l_src, g_src = cross_entropy(logits[:ns], ys)
    l_tgt, g_tgt = cross_entropy(logits[ns:], yt)
    g_logits = np.concatenate([g_src, dm.w_target * g_tgt])

    dom_idx = np.arange(len(x))
    if not domain_on_labeled_target:
        dom_idx = np.concatenate([np.arange(ns), np.arange(ns + nt, len(x))])
    dom_labels = np.where(dom_idx < ns, SOURCE, TARGET)
    d_logits = dm.domain_head.forward(z[dom_idx], train=True)
    l_dom, g_dom = cross_entropy(d_logits, dom_labels)
    l_cls = l_src + dm.w_target * l_tgt
    total = l_cls + dm.lambda_grl * l_dom
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite DANN loss: src={l_src} tgt={l_tgt} dom={l_dom}")
    if backward:
        gz = np.zeros_like(z)
        gz[: ns + nt] += m.classifier.backward(g_logits)
        gz[dom_idx] += dm.domain_head.backward(g_dom)
        m.backward_embed(gz)
    return {"L_src": l_src, "L_tgt": l_tgt, "L_dom": l_dom, "L_total": total}


def dann_step(dm: DannModel, source_batch, target_labeled_batch, target_unlabeled_batch, optimizer,
              domain_on_labeled_target: bool = True) -> tuple[float, float, float, float]:
    """One optimisation step. Batches are ``(x, y)`` pairs; the unlabelled one is just ``x`` (may be empty).

    Returns ``(L_cls_source, L_cls_target, L_dom, L_total)``.
    """
    xs, ys = source_batch
    xt, yt = target_labeled_batch
    optimizer.zero_grad()
    out = dann_losses(dm, xs, ys, xt, yt, target_unlabeled_batch,
                      domain_on_labeled_target=domain_on_labeled_target)
    optimizer.step()
    optimizer.zero_grad()
    return out["L_src"], out["L_tgt"], out["L_dom"], out["L_total"]


class _GroupOptimizer:
    """Steps several optimisers (one per parameter group) as one."""

    def __init__(self, optimizers):
        self.optimizers = list(optimizers)
        for o in self.optimizers:
            o.base_lr = o.lr

    def step(self):
        for o in self.optimizers:
            o.step()

    def zero_grad(self):
        for o in self.optimizers:
            o.zero_grad()


def few_shot_target(pool: Dataset, k: int, seed: int = 0) -> FewShotTargetSet:
    """``k`` labelled samples of each class from ``pool`` (the target training split)."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    picks = []
    for c, name in enumerate(CLASSES):
        idx = np.flatnonzero(pool.y == c)
        if len(idx) < k:
            raise DatasetError(f"target class {name!r} has {len(idx)} samples, needs K={k}")
        picks.append(rng.choice(idx, size=k, replace=False))
    idx = np.sort(np.concatenate(picks))
    return FewShotTargetSet(k, pool.subset(idx), idx)


def _require_all_classes(ds: Dataset, what: str):
    missing = [c for i, c in enumerate(CLASSES) if not np.any(ds.y == i)]
    if missing:
        raise DatasetError(f"{what} is missing classes {missing}")


def adapt(base: QualityModel, source: Dataset, shots: FewShotTargetSet, target_unlabeled: Dataset | None = None,
          config: DannConfig | None = None) -> tuple[DannModel, list[dict]]:
    """Domain-adversarial fine-tuning of a copy of ``base``.

    ``target_unlabeled`` should hold target training images other than the
    shots; their labels are never read.
    """
    cfg = config or DannConfig()
    _require_all_classes(source, "source dataset")
    if shots.k < 1:
        raise ValueError("K must be >= 1")
    if base.num_classes != 3:
        raise ValueError("adaptation expects a 3-class source model")
    dm = DannModel(base.copy(), cfg.lambda_grl, cfg.w_target, cfg.domain_hidden, seed=cfg.seed)
    m = dm.model
    ys_all = m.local_labels(source.y)
    yt_all = m.local_labels(shots.dataset.y)
    xu_all = target_unlabeled.x if target_unlabeled is not None and len(target_unlabeled) else shots.dataset.x
    rng = np.random.default_rng(cfg.seed)
    opt = _GroupOptimizer([make_optimizer(cfg.optimizer, m.parameters(), cfg.lr),
                           make_optimizer(cfg.optimizer, list(dm.domain_head.parameters()),
                                          cfg.lr * cfg.domain_lr_scale)])
    b = cfg.batch_size
    half = max(1, b // 2)
    steps_per_epoch = max(1, len(source) // b)
    total_steps = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            for o in opt.optimizers:
                o.lr = o.base_lr * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs))
        order = rng.permutation(len(source))
        acc = {"L_src": 0.0, "L_tgt": 0.0, "L_dom": 0.0, "L_total": 0.0}
        for s in range(steps_per_epoch):
            if cfg.ramp:
                dm.lambda_grl = cfg.lambda_grl * sigmoid_ramp(step / max(total_steps - 1, 1))
            si = order[s * b:(s + 1) * b]
            ti = rng.integers(0, len(yt_all), half)
            ui = rng.integers(0, len(xu_all), b - half)
            xs = augment_batch(source.x[si], rng, cfg.augment)
            xt = augment_batch(shots.dataset.x[ti], rng, cfg.augment)
            xu = augment_batch(xu_all[ui], rng, cfg.augment) if b - half > 0 else None
            out = dann_step(dm, (xs, ys_all[si]), (xt, yt_all[ti]), xu, opt, cfg.domain_on_labeled_target)
            for k, v in zip(acc, out):
                acc[k] += v
            step += 1
        rec = {"epoch": epoch + 1, "lambda_grl": dm.lambda_grl, **{k: v / steps_per_epoch for k, v in acc.items()}}
        history.append(rec)
        log.debug("dann epoch %d %s", epoch + 1, rec)
    return dm, history


def train_source_model(source: Dataset, backbone_config, train: TrainConfig, seed: int = 0) -> QualityModel:
    """Three-class model trained on source data only (the zero-shot control)."""
    _require_all_classes(source, "source dataset")
    m = QualityModel(replace(backbone_config, num_classes=3), list(CLASSES), seed=seed)
    fit(m, source.x, m.local_labels(source.y), train)
    return m


def baselines(source_model: QualityModel, shots: FewShotTargetSet, train: TrainConfig,
              seed: int = 0) -> dict[str, QualityModel]:
    """The three comparison models.

    ``transfer``: the source model fine-tuned on the target shots.
    ``zero_shot``: the source model unchanged.
    ``target_only``: a fresh model trained on the target shots alone.
    """
    y = source_model.local_labels(shots.dataset.y)
    cfg = replace(train, batch_size=min(train.batch_size, len(y)), seed=seed)
    transfer = source_model.copy()
    fit(transfer, shots.dataset.x, y, cfg)
    fresh = QualityModel(source_model.config, source_model.label_map, seed=seed)
    fit(fresh, shots.dataset.x, y, cfg)
    return {"transfer": transfer, "zero_shot": source_model, "target_only": fresh}


def domain_probe(model: QualityModel, source_x: np.ndarray, target_x: np.ndarray, seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy of a logistic-regression probe predicting domain from frozen embeddings.

    The larger domain is subsampled to the size of the smaller one so chance is 0.5.
    """
    rng = np.random.default_rng(seed)
    n = min(len(source_x), len(target_x))
    xs = source_x[rng.choice(len(source_x), n, replace=False)]
    xt = target_x[rng.choice(len(target_x), n, replace=False)]
    z = np.concatenate([embed(model, xs), embed(model, xt)])
    d = np.r_[np.zeros(n), np.ones(n)]
    return _probe(z, d, folds, seed)


def class_probe(model: QualityModel, x: np.ndarray, y: np.ndarray, seed: int = 0, folds: int = 5) -> float:
    """Cross-validated accuracy of a logistic-regression probe predicting class from frozen embeddings."""
    return _probe(embed(model, x), np.asarray(y), folds, seed)


def _probe(z, labels, folds, seed) -> float:
    folds = int(min(folds, np.bincount(labels.astype(int)).min()))
    if folds < 2:
        raise DatasetError("probe needs at least 2 samples of every label")
    clf = LogisticRegression(max_iter=2000)
    cv = StratifiedKFold(folds, shuffle=True, random_state=seed)
    return float(np.mean(cross_val_score(clf, z, labels, cv=cv)))


def pca_2d(z: np.ndarray) -> np.ndarray:
    """Project rows of ``z`` on their top two principal components."""
    zc = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(zc, full_matrices=False)
    return zc @ vt[:2].T


def write_pca_csv(model: QualityModel, dataset: Dataset, path: str | Path) -> Path:
    """CSV with columns x, y, domain, class for a 2-D view of the embedding."""
    xy = pca_2d(embed(model, dataset.x))
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "domain", "class"])
        for (a, b), d, c in zip(xy, dataset.domain, dataset.y):
            w.writerow([f"{a:.6g}", f"{b:.6g}", DOMAINS[int(d)], CLASSES[int(c)]])
    return path


def summarize(rows: list[dict]) -> list[dict]:
    """Collapse per-seed rows ``{shots, domain, method, accuracy}`` to mean and std per group."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["shots"], r["domain"], r["method"]), []).append(r["accuracy"])
    return [{"shots": k[0], "domain": k[1], "method": k[2], "mean": float(np.mean(v)),
             "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
            for k, v in sorted(groups.items())]


def write_comparison_csv(summary: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["shots", "domain", "method", "mean", "std"])
        w.writeheader()
        for r in summary:
            w.writerow(r)
    return path


def evaluate_domains(model: QualityModel, source_test: Dataset, target_test: Dataset) -> dict:
    return {"source": evaluate(model, source_test), "target": evaluate(model, target_test)}
