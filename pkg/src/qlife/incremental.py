"""Few-shot class-incremental update of a two-class quality model.

The classifier head is swapped for a fresh three-class head, a balanced
rehearsal set of ``K`` samples per class is assembled from the new shots and
the known-class training pool, and the model is fine-tuned in two stages:
first the head alone with the backbone frozen, then everything at a much
smaller learning rate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import CLASSES, Dataset, DatasetError, class_index
from .engine import Dense, params_digest
from .model import QualityModel, TrainConfig, evaluate, fit

log = logging.getLogger(__name__)


class FreezeViolation(AssertionError):
    """A parameter that should have been frozen changed during head tuning."""


@dataclass
class StageSchedule:
    head_epochs: int = 15
    head_lr: float = 1e-3
    e2e_epochs: int = 15
    e2e_lr: float = 5e-5

    def __post_init__(self):
        for name in ("head_epochs", "head_lr", "e2e_epochs", "e2e_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class RehearsalSet:
    """``K`` new-class shots plus ``K`` replayed samples of every known class."""

    new_class: str
    k: int
    dataset: Dataset
    new_indices: np.ndarray
    replay_indices: dict
    replay_k: int | None = None  # samples per known class; equals ``k`` unless the total reading is used

    def __post_init__(self):
        if self.replay_k is None:
            self.replay_k = self.k

    def __len__(self):
        return len(self.dataset)


def expand_head(model: QualityModel, new_class: str, seed: int = 0, zero_init: bool = False) -> QualityModel:
    """Return a copy of ``model`` with a fresh classifier that has one more output.

    The backbone weights are copied untouched. The new head uses the same
    seeded Kaiming initialisation as every other dense layer, or all zeros
    when ``zero_init`` is set.
    """
    if model.num_classes != 2:
        raise ValueError(f"expand_head expects a 2-class model, this one has {model.num_classes} classes")
    new_class = CLASSES[class_index(new_class)]
    if new_class in model.label_map:
        raise ValueError(f"class {new_class!r} is already in the label map {model.label_map}")
    out = model.copy()
    out.config = replace(model.config, num_classes=3)
    out.label_map = list(model.label_map) + [new_class]
    head = Dense(model.config.embed_dim, 3, rng=np.random.default_rng(seed))
    if zero_init:
        head.params["weight"][...] = 0.0
    dtype = model.classifier.params["weight"].dtype
    out.classifier = head.astype(dtype)
    return out


def build_rehearsal_set(new_samples: Dataset, known_pool: Dataset, k: int, known_classes, new_class: str,
                        seed: int = 0, replay_total: bool = False) -> RehearsalSet:
    """Draw ``k`` new-class shots and ``k`` samples per known class, without replacement.

    With ``replay_total`` the ``k`` replayed samples are shared between the
    known classes instead (``k // n_known`` each).
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    known_classes = list(known_classes)
    per_known = k // len(known_classes) if replay_total else k
    if per_known < 1:
        raise ValueError(f"K={k} is too small to replay every known class")
    rng = np.random.default_rng(seed)
    new_class = CLASSES[class_index(new_class)]
    new_idx = np.flatnonzero(new_samples.y == class_index(new_class))
    if len(new_idx) < k:
        raise DatasetError(f"class {new_class!r} has {len(new_idx)} samples, needs K={k}")
    new_pick = np.sort(rng.choice(new_idx, size=k, replace=False))
    replay = {}
    for name in known_classes:
        name = CLASSES[class_index(name)]
        idx = np.flatnonzero(known_pool.y == class_index(name))
        if len(idx) < per_known:
            raise DatasetError(f"class {name!r} has {len(idx)} samples in the replay pool, needs {per_known}")
        replay[name] = np.sort(rng.choice(idx, size=per_known, replace=False))
    parts = [known_pool.subset(replay[n]) for n in replay] + [new_samples.subset(new_pick)]
    return RehearsalSet(new_class, k, Dataset.concat(parts), new_pick, replay, per_known)


def _stage_config(base: TrainConfig, epochs: int, lr: float, n: int, seed: int) -> TrainConfig:
    # each stage runs at its fixed learning rate, no decay
    return replace(base, epochs=epochs, lr=lr, batch_size=min(16, n), schedule="constant", seed=seed)


def finetune_two_stage(model: QualityModel, rehearsal: RehearsalSet, schedule: StageSchedule | None = None,
                       train: TrainConfig | None = None, seed: int = 0) -> tuple[QualityModel, dict]:
    """Head tuning with a frozen backbone, then end-to-end tuning.

    Both stages keep the dual-view augmentation and scale-consistency term of
    ``train``. Raises :class:`FreezeViolation` if stage one moves any backbone
    weight or buffer.
    """
    schedule = schedule or StageSchedule()
    base = train or TrainConfig()
    if model.num_classes != 3:
        raise ValueError("finetune_two_stage expects an expanded 3-class model")
    data = rehearsal.dataset
    y = model.local_labels(data.y)
    counts = np.bincount(y, minlength=3)
    expected = [rehearsal.replay_k if name != rehearsal.new_class else rehearsal.k for name in model.label_map]
    if counts.tolist() != expected:
        raise DatasetError(f"rehearsal set does not hold {expected} samples per class: "
                           f"{dict(zip(model.label_map, counts.tolist()))}")

    frozen = [model.extractor, model.processor]
    before = params_digest(*frozen)
    cfg1 = _stage_config(base, schedule.head_epochs, schedule.head_lr, len(data), seed)
    h1 = fit(model, data.x, y, cfg1, params=model.head_parameters(), head_only=True)
    if params_digest(*frozen) != before:
        raise FreezeViolation("backbone parameters changed during head tuning")

    cfg2 = _stage_config(base, schedule.e2e_epochs, schedule.e2e_lr, len(data), seed + 1)
    h2 = fit(model, data.x, y, cfg2)
    return model, {"stage1": h1, "stage2": h2, "backbone_digest_stage1": before}


def baseline_finetune(old_data: Dataset, new_shots: Dataset, model: QualityModel,
                      train: TrainConfig | None = None, k_shots_only: bool = False, k: int | None = None,
                      seed: int = 0) -> tuple[QualityModel, list[dict]]:
    """Single-stage end-to-end training of a fresh 3-class model, no rehearsal and no SCL.

    By default the model sees all old-class data plus the new shots
    (imbalanced). With ``k_shots_only`` every class is cut down to ``k``
    samples instead.
    """
    cfg = replace(train or TrainConfig(), scl_weight=0.0, dual_view=False, seed=seed)
    data = Dataset.concat([old_data, new_shots])
    if k_shots_only:
        if k is None:
            raise ValueError("k_shots_only needs k")
        rng = np.random.default_rng(seed)
        keep = []
        for c in sorted(set(data.y.tolist())):
            idx = np.flatnonzero(data.y == c)
            keep.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
        data = data.subset(np.sort(np.concatenate(keep)))
    y = model.local_labels(data.y)
    present = set(y.tolist())
    if len(present) < 2:
        raise DatasetError("baseline fine-tuning needs at least 2 classes")
    return model, fit(model, data.x, y, cfg)


def old_class_recall(metrics: dict, old_classes) -> float:
    """Mean recall over the old classes, from an ``evaluate`` result."""
    vals = [metrics["per_class_recall"][c] for c in old_classes if metrics["per_class_recall"].get(c) is not None]
    return float(np.mean(vals)) if vals else float("nan")


def run_scenario(base_model: QualityModel, train_pool: Dataset, test_set: Dataset, new_class: str, k: int,
                 seed: int = 0, schedule: StageSchedule | None = None, train: TrainConfig | None = None,
                 with_baseline: bool = False, baseline_train: TrainConfig | None = None,
                 zero_init_head: bool = True, replay_total: bool = False, baseline_k_shots: bool = False) -> dict:
    """One rotation at one shot count: expand, rehearse, fine-tune, evaluate.

    ``base_model`` must already be trained on the two known classes; it is
    not modified. ``train_pool`` is the training split (all classes), so
    test samples can never enter the rehearsal set.
    """
    new_class = CLASSES[class_index(new_class)]
    known = list(base_model.label_map)
    before = evaluate(base_model, test_set.subset(test_set.where(classes=known)))
    model = expand_head(base_model, new_class, seed=seed, zero_init=zero_init_head)
    rs = build_rehearsal_set(train_pool, train_pool, k, known, new_class, seed=seed, replay_total=replay_total)
    model, hist = finetune_two_stage(model, rs, schedule, train, seed=seed)
    after = evaluate(model, test_set)
    out = {"scenario": new_class, "K": k, "seed": seed, "accuracy": after["accuracy"],
           "old_recall_before": old_class_recall(before, known), "old_recall_after": old_class_recall(after, known),
           "metrics": after, "history": hist, "model": model, "rehearsal": rs}
    if with_baseline:
        fresh = QualityModel(replace(base_model.config, num_classes=3), known + [new_class], seed=seed)
        old = train_pool.subset(train_pool.where(classes=known))
        shots = train_pool.subset(rs.new_indices)
        fresh, _ = baseline_finetune(old, shots, fresh, baseline_train or train, k_shots_only=baseline_k_shots,
                                     k=k, seed=seed)
        out["baseline_accuracy"] = evaluate(fresh, test_set)["accuracy"]
    return out


def write_sweep_csv(rows: list[dict], path: str | Path) -> Path:
    """CSV with columns scenario, K, seed, accuracy (plus baseline_accuracy when present)."""
    path = Path(path)
    cols = ["scenario", "K", "seed", "accuracy"]
    if any("baseline_accuracy" in r for r in rows):
        cols.append("baseline_accuracy")
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
