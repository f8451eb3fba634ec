"""Backbone: conv feature extractor -> spatial pyramid pooling -> feature processor -> classifier.

Training feeds two independently augmented views of every image through the
shared backbone and adds a scale-consistency term (MSE between the
L2-normalised embeddings of the two views) to the cross-entropy loss.
"""

from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CLASSES, AugmentConfig, Dataset, DatasetError, augment_batch, class_index
from .engine import (BatchNorm1d, Conv2d, Dense, Dropout, ReLU, Sequential, SpatialPyramidPool, cross_entropy,
                     make_optimizer, softmax)

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    in_channels: int = 1
    conv_channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    stride: int = 2
    spp_levels: tuple = (4, 2, 1)
    embed_dim: int = 512
    num_classes: int = 2
    scl_weight: float = 0.1
    dropout_rate: float = 0.5
    # set to a feature width to bypass the conv extractor and SPP
    precomputed_dim: int | None = None

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.spp_levels = tuple(int(v) for v in self.spp_levels)
        if not self.spp_levels or min(self.spp_levels) < 1:
            raise ValueError(f"spp_levels must be non-empty and >= 1, got {self.spp_levels}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.scl_weight < 0:
            raise ValueError("scl_weight must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.precomputed_dim is None and not self.conv_channels:
            raise ValueError("conv_channels must be non-empty unless precomputed_dim is set")

    @property
    def spp_width(self) -> int:
        if self.precomputed_dim is not None:
            return self.precomputed_dim
        return sum(v * v for v in self.spp_levels) * self.conv_channels[-1]


class QualityModel:
    """The backbone plus a linear classifier over its embedding."""

    def __init__(self, config: BackboneConfig, label_map: list[str] | None = None, seed: int = 0):
        self.config = config
        self.label_map = list(label_map) if label_map is not None else list(CLASSES[: config.num_classes])
        if len(self.label_map) != config.num_classes:
            raise ValueError(f"label_map has {len(self.label_map)} names for {config.num_classes} classes")
        rng = np.random.default_rng(seed)
        layers = []
        if config.precomputed_dim is None:
            c_in = config.in_channels
            pad = config.kernel_size // 2
            for c_out in config.conv_channels:
                layers += [Conv2d(c_in, c_out, config.kernel_size, config.stride, pad, rng=rng), ReLU()]
                c_in = c_out
            self.spp: SpatialPyramidPool | None = SpatialPyramidPool(config.spp_levels)
        else:
            self.spp = None
        self.extractor = Sequential(layers)
        self.processor = Sequential([
            Dense(config.spp_width, config.embed_dim, rng=rng),
            ReLU(),
            Dropout(config.dropout_rate, seed=int(rng.integers(2**32))),
            BatchNorm1d(config.embed_dim),
        ])
        self.classifier = Dense(config.embed_dim, config.num_classes, rng=rng)

    # -- structure -------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def backbone_networks(self) -> list:
        nets = [self.extractor]
        if self.spp is not None:
            nets.append(Sequential([self.spp]))
        nets.append(self.processor)
        return nets

    def backbone_parameters(self):
        return list(self.extractor.parameters()) + list(self.processor.parameters())

    def head_parameters(self):
        return [(self.classifier, n) for n in self.classifier.params]

    def parameters(self):
        return self.backbone_parameters() + self.head_parameters()

    def zero_grad(self):
        self.extractor.zero_grad()
        self.processor.zero_grad()
        self.classifier.zero_grad()

    def copy(self) -> "QualityModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "QualityModel":
        self.extractor.astype(dtype)
        self.processor.astype(dtype)
        self.classifier.astype(dtype)
        return self

    # -- passes ----------------------------------------------------------
    def spp_features(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if self.spp is None:
            if x.ndim != 2 or x.shape[1] != self.config.precomputed_dim:
                raise DatasetError(f"expected precomputed features of width {self.config.precomputed_dim}, got {x.shape}")
            return x
        fmap = self.extractor.forward(x, train)
        return self.spp.forward(fmap, train)

    def embed_batch(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.processor.forward(self.spp_features(x, train), train)

    def backward_embed(self, grad_z: np.ndarray) -> np.ndarray:
        g = self.processor.backward(grad_z)
        if self.spp is None:
            return g
        return self.extractor.backward(self.spp.backward(g))

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.classifier.forward(self.embed_batch(x, train), train)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"extractor.{k}": v for k, v in self.extractor.state_dict().items()}
        state.update({f"processor.{k}": v for k, v in self.processor.state_dict().items()})
        state.update({f"classifier.{k}": v for k, v in self.classifier.params.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        groups: dict[str, dict] = {"extractor": {}, "processor": {}, "classifier": {}}
        for key, arr in state.items():
            head, rest = key.split(".", 1)
            groups[head][rest] = arr
        self.extractor.load_state_dict(groups["extractor"])
        self.processor.load_state_dict(groups["processor"])
        for name, arr in groups["classifier"].items():
            if self.classifier.params[name].shape != arr.shape:
                raise ValueError(f"classifier.{name}: shape {arr.shape} != {self.classifier.params[name].shape}")
            self.classifier.params[name] = np.array(arr, dtype=self.classifier.params[name].dtype, copy=True)
        self.classifier.zero_grad()

    def describe(self) -> dict:
        return {"config": asdict(self.config), "label_map": self.label_map,
                "extractor": self.extractor.describe(), "processor": self.processor.describe(),
                "classifier": self.classifier.describe()}

    def local_labels(self, global_labels: np.ndarray) -> np.ndarray:
        """Map dataset class indices onto this model's output indices."""
        lookup = {class_index(name): i for i, name in enumerate(self.label_map)}
        try:
            return np.array([lookup[int(g)] for g in global_labels], dtype=np.int64)
        except KeyError as exc:
            raise DatasetError(f"class {CLASSES[int(exc.args[0])]!r} is not in label map {self.label_map}") from None


def _chunks(n: int, size: int):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("QLIFE_THREADS", "1")))
    except ValueError:
        return 1


def embed(model: QualityModel, images: np.ndarray, mode: str = "eval", batch_size: int = 256) -> np.ndarray:
    """Embeddings for a single image ``(c, h, w)`` or a batch ``(n, c, h, w)``.

    Eval mode is side-effect free and batches are fanned out over
    ``QLIFE_THREADS`` threads.
    """
    single = images.ndim == (3 if model.spp is not None else 1)
    x = images[None] if single else images
    if mode == "train":
        z = model.embed_batch(x, train=True)
    else:
        parts = _chunks(len(x), batch_size)
        if _threads() > 1 and len(parts) > 1:
            with ThreadPoolExecutor(_threads()) as pool:
                outs = list(pool.map(lambda s: model.embed_batch(x[s]), parts))
        else:
            outs = [model.embed_batch(x[s]) for s in parts]
        z = np.concatenate(outs) if outs else np.zeros((0, model.config.embed_dim), np.float32)
    return z[0] if single else z


def predict_logits(model: QualityModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    z = embed(model, x, batch_size=batch_size)
    return model.classifier.forward(z, train=False)


def predict(model: QualityModel, x: np.ndarray) -> np.ndarray:
    return predict_logits(model, x).argmax(axis=1)


def scl_loss(z1: np.ndarray, z2: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """MSE between L2-normalised embeddings, with gradients for both inputs.

    Accepts single vectors or ``(batch, dim)`` arrays; the mean runs over
    every element.
    """
    a = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    b = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise FloatingPointError("zero-norm embedding in scale-consistency loss (collapsed features)")
    ua, ub = a / na, b / nb
    diff = ua - ub
    loss = float(np.mean(diff ** 2))
    gu = 2.0 * diff / diff.size
    ga = (gu - ua * np.sum(gu * ua, axis=1, keepdims=True)) / na
    gb = (-gu - ub * np.sum(-gu * ub, axis=1, keepdims=True)) / nb
    shape = np.shape(z1)
    return loss, ga.reshape(shape).astype(np.asarray(z1).dtype), gb.reshape(shape).astype(np.asarray(z2).dtype)


def total_loss(ce: float, scl: float, scl_weight: float = 0.1) -> float:
    return ce + scl_weight * scl


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    scl_weight: float = 0.1
    dual_view: bool = True
    schedule: str = "constant"  # or "cosine"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0


def train_step(model: QualityModel, xb: np.ndarray, yb: np.ndarray, opt, cfg: TrainConfig,
               rng: np.random.Generator, head_only: bool = False) -> dict:
    """One optimisation step on a mini-batch. Returns the loss terms and hit count."""
    b = len(xb)
    if cfg.dual_view and model.spp is not None:
        views = np.concatenate([augment_batch(xb, rng, cfg.augment), augment_batch(xb, rng, cfg.augment)])
        labels = np.concatenate([yb, yb])
    else:
        views, labels = xb, yb
    z = model.embed_batch(views, train=not head_only)
    logits = model.classifier.forward(z, train=True)
    ce, g_logits = cross_entropy(logits, labels)
    gz = model.classifier.backward(g_logits)
    scl = 0.0
    if cfg.dual_view and model.spp is not None and len(views) == 2 * b:
        scl, g1, g2 = scl_loss(z[:b], z[b:])
        gz[:b] += cfg.scl_weight * g1
        gz[b:] += cfg.scl_weight * g2
    if not head_only:
        model.backward_embed(gz)
    opt.step()
    opt.zero_grad()
    hits = int((logits.argmax(axis=1) == labels).sum())
    return {"ce": ce, "scl": scl, "loss": total_loss(ce, scl, cfg.scl_weight), "hits": hits, "n": len(labels)}


def fit(model: QualityModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, params=None,
        head_only: bool = False) -> list[dict]:
    """Mini-batch training loop shared by every training routine.

    ``y`` holds model-local labels. ``params`` restricts which parameters the
    optimiser touches; ``head_only`` also runs the backbone in eval mode so
    nothing but the classifier can change.
    """
    if len(x) == 0:
        raise DatasetError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = params if params is not None else model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum, cfg.weight_decay)
    model.zero_grad()
    history = []
    for epoch in range(cfg.epochs):
        if cfg.schedule == "cosine":
            opt.lr = cfg.lr * 0.5 * (1 + np.cos(np.pi * epoch / cfg.epochs))
        order = rng.permutation(len(x))
        stats = {"ce": 0.0, "scl": 0.0, "loss": 0.0, "hits": 0, "n": 0}
        batches = 0
        for s in _chunks(len(x), cfg.batch_size):
            idx = order[s]
            if len(idx) < 2 and not head_only:
                continue  # batchnorm needs two samples
            out = train_step(model, x[idx], y[idx], opt, cfg, rng, head_only=head_only)
            for k in ("ce", "scl", "loss"):
                stats[k] += out[k]
            stats["hits"] += out["hits"]
            stats["n"] += out["n"]
            batches += 1
        batches = max(batches, 1)
        rec = {"epoch": epoch + 1, "loss": stats["loss"] / batches, "ce": stats["ce"] / batches,
               "scl": stats["scl"] / batches, "train_accuracy": stats["hits"] / max(stats["n"], 1)}
        history.append(rec)
        log.debug("epoch %d loss %.4f acc %.3f", rec["epoch"], rec["loss"], rec["train_accuracy"])
    return history


def train_baseline(model: QualityModel, dataset: Dataset, cfg: TrainConfig | None = None) -> tuple[QualityModel, list[dict]]:
    """Train the classifier on the classes in its label map (normally two known classes)."""
    cfg = cfg or TrainConfig()
    present = sorted({int(v) for v in dataset.y})
    if len(present) < 2:
        raise DatasetError(f"baseline training needs at least 2 classes, got {[CLASSES[i] for i in present]}")
    y = model.local_labels(dataset.y)
    history = fit(model, dataset.x, y, cfg)
    return model, history


def confusion_matrix(true: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray, label_map: list[str]) -> dict:
    total = int(cm.sum())
    support = cm.sum(axis=1)
    recall = {label_map[i]: (float(cm[i, i] / support[i]) if support[i] else None) for i in range(len(label_map))}
    return {"accuracy": float(np.trace(cm) / total), "per_class_recall": recall,
            "confusion_matrix": cm.tolist(), "labels": list(label_map), "n": total}


def evaluate(model: QualityModel, dataset: Dataset) -> dict:
    """Accuracy, per-class recall and confusion matrix (rows true, columns predicted)."""
    if len(dataset) == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    true = model.local_labels(dataset.y)
    pred = predict(model, dataset.x)
    return metrics_from_confusion(confusion_matrix(true, pred, model.num_classes), model.label_map)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return np.sum(a * b, axis=-1)


def class_probabilities(model: QualityModel, x: np.ndarray) -> np.ndarray:
    return softmax(predict_logits(model, x))
