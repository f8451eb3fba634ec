"""Synthetic two-domain quality imagery, dataset I/O, splits and augmentation.

The generator mimics the topology of a small inspection dataset: a source
domain of shaded discs and a target domain of flat squares overlaid with
horizontal scan-line artifacts, each in three quality grades. Defects are
dark blotches (and, for heavier damage, eroded edges) whose area grows with
severity, so grade is a continuum that the labels cut into three bins.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSES = ("good", "minor-damaged", "damaged")
DOMAINS = ("source", "target")

_CLASS_ALIASES = {
    "good": 0, "minor-damaged": 1, "minor_damaged": 1, "minor": 1, "damaged": 2,
}

# Hemisphere / cube counts from the original inspection dataset.
TABLE1_COUNTS = {
    ("source", "good"): 975, ("source", "minor-damaged"): 294, ("source", "damaged"): 364,
    ("target", "good"): 179, ("target", "minor-damaged"): 21, ("target", "damaged"): 11,
}


class DatasetError(ValueError):
    """Bad input data. ``problems`` lists one diagnostic per offending item."""

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ": " + "; ".join(self.problems[:10])
        super().__init__(message)


def class_index(name: str) -> int:
    try:
        return _CLASS_ALIASES[name.strip().lower()]
    except KeyError:
        raise DatasetError(f"unknown class {name!r}; expected one of {CLASSES}") from None


def domain_index(name: str) -> int:
    try:
        return DOMAINS.index(name.strip().lower())
    except ValueError:
        raise DatasetError(f"unknown domain {name!r}; expected one of {DOMAINS}") from None


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    class_label: str
    domain_label: str
    id: str
    precomputed: bool = False


@dataclass
class Dataset:
    """Column-oriented collection of samples.

    ``x`` is ``(n, 1, h, w)`` for images or ``(n, d)`` for precomputed
    feature vectors; ``y`` and ``domain`` index into ``CLASSES`` and
    ``DOMAINS``.
    """

    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    ids: list[str]
    precomputed: bool = False
    defect_fraction: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.x) == len(self.y) == len(self.domain) == n):
            raise DatasetError("dataset columns differ in length")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], CLASSES[self.y[i]], DOMAINS[self.domain[i]], self.ids[i], self.precomputed)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        df = None if self.defect_fraction is None else self.defect_fraction[idx]
        return Dataset(self.x[idx], self.y[idx], self.domain[idx], [self.ids[i] for i in idx],
                       self.precomputed, df)

    def where(self, domain: str | None = None, classes=None) -> np.ndarray:
        """Indices matching a domain name and/or a collection of class names."""
        mask = np.ones(len(self), dtype=bool)
        if domain is not None:
            mask &= self.domain == domain_index(domain)
        if classes is not None:
            mask &= np.isin(self.y, [class_index(c) for c in classes])
        return np.flatnonzero(mask)

    def counts(self) -> dict[tuple[str, str], int]:
        out = {}
        for d in range(len(DOMAINS)):
            for c in range(len(CLASSES)):
                n = int(np.sum((self.domain == d) & (self.y == c)))
                if n:
                    out[(DOMAINS[d], CLASSES[c])] = n
        return out

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise DatasetError("nothing to concatenate")
        dfs = [p.defect_fraction for p in parts]
        df = None if any(d is None for d in dfs) else np.concatenate(dfs)
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                       np.concatenate([p.domain for p in parts]), sum((p.ids for p in parts), []),
                       parts[0].precomputed, df)


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticSpec:
    counts: dict = field(default_factory=lambda: dict(TABLE1_COUNTS))
    image_size: int = 64
    seed: int = 0
    # defect area as a fraction of the structure area, per grade
    defect_area: dict = field(default_factory=lambda: {
        "good": (0.0, 0.02), "minor-damaged": (0.16, 0.20), "damaged": (0.45, 0.60)})
    # structure radius / half-side as a fraction of the image size
    structure_scale: tuple = (0.24, 0.36)
    line_period: tuple = (4, 7)
    line_strength: float = 0.45
    noise: float = 0.03

    def __post_init__(self):
        self.counts = {(d, CLASSES[class_index(c)]): int(n) for (d, c), n in self.counts.items()}
        for (d, c), n in self.counts.items():
            domain_index(d)
            if n < 0:
                raise DatasetError(f"negative count for {d}/{c}")
        if self.image_size < 16:
            raise DatasetError(f"image size must be >= 16, got {self.image_size}")
        lo, hi = self.structure_scale
        if not 0 < lo <= hi or hi > 0.5:
            raise DatasetError(f"structure scale {self.structure_scale} does not fit in the image")
        prev = -1.0
        for name in CLASSES:
            a, b = self.defect_area[name]
            if not 0 <= a <= b:
                raise DatasetError(f"bad defect range for {name}: {(a, b)}")
            if b > 0.9:
                raise DatasetError(f"defect area {b} for {name} exceeds the structure")
            if a < prev:
                raise DatasetError("defect ranges must increase good -> minor -> damaged")
            prev = b

    @classmethod
    def scaled(cls, factor: float, minimum: int = 1, **kw) -> "SyntheticSpec":
        """Table-1 topology with every count multiplied by ``factor``."""
        counts = {k: max(minimum, int(round(v * factor))) for k, v in TABLE1_COUNTS.items()}
        return cls(counts=counts, **kw)


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _structure(domain: int, size: int, spec: SyntheticSpec, rng):
    """Return (intensity image, structure mask)."""
    yy, xx = _grid(size)
    lo, hi = spec.structure_scale
    r = rng.uniform(lo, hi) * size
    cy, cx = size / 2 + rng.uniform(-0.04, 0.04, 2) * size
    bg = rng.uniform(0.12, 0.2)
    if domain == 0:
        d2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / r ** 2
        mask = d2 <= 1.0
        shade = 0.92 - 0.3 * d2
        img = np.where(mask, shade, bg)
    else:
        mask = (np.abs(yy - cy) <= r * 0.88) & (np.abs(xx - cx) <= r * 0.88)
        tilt = rng.uniform(-0.08, 0.08)
        shade = 0.78 + tilt * (xx - cx) / r
        img = np.where(mask, shade, bg)
        # darker rim around the square
        rim = mask & ~((np.abs(yy - cy) <= r * 0.88 - 2) & (np.abs(xx - cx) <= r * 0.88 - 2))
        img = np.where(rim, img * 0.7, img)
    return img, mask, (cy, cx, r)


def _defect_mask(struct_mask, geom, target_frac, heavy, size, rng, nominal_r=None):
    """Blotches (plus edge bites when ``heavy``) covering ~``target_frac`` of the structure.

    With ``nominal_r`` the fraction refers to a structure of that radius, so
    the defect's pixel area does not grow with the structure's size.
    """
    yy, xx = _grid(size)
    cy, cx, r = geom
    area = struct_mask.sum()
    defect = np.zeros_like(struct_mask)
    if target_frac <= 0:
        return defect
    goal = target_frac * area
    if nominal_r is not None:
        goal *= (nominal_r / r) ** 2
    for _ in range(60):
        if defect.sum() >= goal:
            break
        remaining = goal - defect.sum()
        if heavy and rng.random() < 0.4:
            # bite out of the rim
            ang = rng.uniform(0, 2 * np.pi)
            by, bx = cy + r * np.sin(ang), cx + r * np.cos(ang)
        else:
            ang = rng.uniform(0, 2 * np.pi)
            rad = r * np.sqrt(rng.uniform(0, 0.7))
            by, bx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
        br = np.sqrt(min(remaining, 0.6 * goal + 2) / np.pi) * rng.uniform(0.8, 1.3)
        ar = rng.uniform(0.6, 1.6)
        blob = ((yy - by) / (br * ar)) ** 2 + ((xx - bx) * ar / br) ** 2 <= 1.0
        defect |= blob & struct_mask
    return defect


def render_sample(domain: int, cls: int, spec: SyntheticSpec, rng: np.random.Generator):
    """Render one image. Returns ``(image, defect_mask, structure_mask)``."""
    size = spec.image_size
    img, mask, geom = _structure(domain, size, spec, rng)
    lo, hi = spec.defect_area[CLASSES[cls]]
    frac = rng.uniform(lo, hi)
    nominal_r = 0.5 * sum(spec.structure_scale) * size
    defect = _defect_mask(mask, geom, frac, heavy=cls == 2, size=size, rng=rng, nominal_r=nominal_r)
    img = np.where(defect, img * rng.uniform(0.2, 0.35), img)
    img = img + rng.normal(0, spec.noise, img.shape)
    if domain == 1:
        period = rng.integers(spec.line_period[0], spec.line_period[1] + 1)
        phase = rng.integers(0, period)
        rows = np.arange(size) % period == phase
        strength = spec.line_strength * rng.uniform(0.8, 1.2)
        img[rows] = img[rows] * (1 - strength)
    img = np.clip(img, 0.0, 1.0)
    # quantise to 8-bit levels so PNG round trips are exact
    img = np.round(img * 255.0) / 255.0
    return img.astype(np.float32), defect, mask


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic per ``spec.seed``; each (domain, class, index) has its own stream."""
    xs, ys, ds, ids, fracs = [], [], [], [], []
    for d_name in DOMAINS:
        d = domain_index(d_name)
        for c in range(len(CLASSES)):
            n = spec.counts.get((d_name, CLASSES[c]), 0)
            for i in range(n):
                rng = np.random.default_rng([spec.seed, d, c, i])
                img, defect, mask = render_sample(d, c, spec, rng)
                xs.append(img[None])
                ys.append(c)
                ds.append(d)
                ids.append(f"{d_name}-{CLASSES[c]}-{i:05d}")
                fracs.append(defect.sum() / max(mask.sum(), 1))
    s = spec.image_size
    x = np.stack(xs) if xs else np.zeros((0, 1, s, s), np.float32)
    return Dataset(x, np.array(ys, np.int64), np.array(ds, np.int64), ids, False,
                   np.array(fracs, np.float64))


# --------------------------------------------------------------------------
# splits


@dataclass
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def to_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist(),
                "seed": self.seed}

    def name_of(self, n: int) -> list[str]:
        names = [""] * n
        for split in ("train", "val", "test"):
            for i in getattr(self, split):
                names[i] = split
        return names


def split(dataset: Dataset, fractions=(0.7, 0.0, 0.3), seed: int = 0) -> DataSplit:
    """Stratified by (domain, class); each stratum is shuffled independently."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    _, f_val, f_test = fractions
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for d in range(len(DOMAINS)):
        for c in range(len(CLASSES)):
            idx = np.flatnonzero((dataset.domain == d) & (dataset.y == c))
            n = len(idx)
            if n == 0:
                continue
            idx = rng.permutation(idx)
            n_test = int(round(n * f_test))
            n_val = int(round(n * f_val))
            n_train = n - n_test - n_val
            if (f_test > 0 and n_test == 0) or (f_val > 0 and n_val == 0) or (fractions[0] > 0 and n_train <= 0):
                raise DatasetError(f"class {DOMAINS[d]}/{CLASSES[c]} has {n} samples, too few for split {fractions}")
            parts["test"].append(idx[:n_test])
            parts["val"].append(idx[n_test:n_test + n_val])
            parts["train"].append(idx[n_test + n_val:])
    cat = {k: np.sort(np.concatenate(v)) if v else np.zeros(0, np.int64) for k, v in parts.items()}
    return DataSplit(cat["train"], cat["val"], cat["test"], seed)


def assert_no_leakage(pool_indices, test_indices) -> None:
    overlap = np.intersect1d(np.asarray(pool_indices), np.asarray(test_indices))
    if overlap.size:
        raise DatasetError(f"{overlap.size} training-pool samples also appear in the test split")


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.6, 1.0)
    crop_ratio: tuple = (0.8, 1.25)
    flip: bool = True
    brightness: float = 0.05
    contrast: float = 0.1

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip=False, brightness=0.0, contrast=0.0)


def sample_crop_boxes(n: int, h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """``(n, 4)`` boxes ``(top, left, height, width)`` lying inside an ``h x w`` image."""
    scale = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1], n)
    log_r = rng.uniform(np.log(cfg.crop_ratio[0]), np.log(cfg.crop_ratio[1]), n)
    ratio = np.exp(log_r)
    area = scale * h * w
    cw = np.clip(np.sqrt(area * ratio), 1, w)
    ch = np.clip(np.sqrt(area / ratio), 1, h)
    top = rng.uniform(0, 1, n) * (h - ch)
    left = rng.uniform(0, 1, n) * (w - cw)
    return np.stack([top, left, ch, cw], axis=1)


def resample(images: np.ndarray, boxes: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of each box of ``images`` (n, c, h, w) to ``out_hw``."""
    n, c, h, w = images.shape
    oh, ow = out_hw
    top, left, bh, bw = (boxes[:, i][:, None] for i in range(4))
    sy = top + (np.arange(oh)[None] + 0.5) * bh / oh - 0.5
    sx = left + (np.arange(ow)[None] + 0.5) * bw / ow - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None, :, None]
    wx = (sx - x0)[:, None, None, :]
    bi = np.arange(n)[:, None, None]

    def gather(yi, xi):
        return images[bi, :, yi[:, :, None], xi[:, None, :]].transpose(0, 3, 1, 2)

    top_row = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot_row = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return (top_row * (1 - wy) + bot_row * wy).astype(images.dtype)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """One independent random view per image of an ``(n, c, h, w)`` batch."""
    if images.ndim != 4:
        raise DatasetError("augmentation needs image samples, not precomputed features")
    n, _, h, w = images.shape
    boxes = sample_crop_boxes(n, h, w, cfg, rng)
    out = resample(images, boxes, (h, w))
    if cfg.flip:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][..., ::-1]
    if cfg.contrast or cfg.brightness:
        mean = out.mean(axis=(1, 2, 3), keepdims=True)
        c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, (n, 1, 1, 1))
        b = rng.uniform(-cfg.brightness, cfg.brightness, (n, 1, 1, 1))
        out = np.clip((out - mean) * c + mean + b, 0.0, 1.0)
    return out.astype(images.dtype)


def augment_pair(sample: LabeledSample, seed: int, cfg: AugmentConfig = AugmentConfig()):
    """Two independently transformed views of one image sample, label unchanged."""
    if sample.precomputed or sample.image.ndim != 3:
        raise DatasetError(f"sample {sample.id} is a precomputed feature vector; it cannot be augmented")
    rng = np.random.default_rng(seed)
    v1 = augment_batch(sample.image[None], rng, cfg)[0]
    v2 = augment_batch(sample.image[None], rng, cfg)[0]
    return v1, v2


def rescale(images: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the image centre by ``factor`` (> 1 enlarges the structure)."""
    n, _, h, w = images.shape
    bh, bw = h / factor, w / factor
    boxes = np.tile([(h - bh) / 2, (w - bw) / 2, bh, bw], (n, 1))
    return resample(images, boxes, (h, w))


# --------------------------------------------------------------------------
# I/O


def write_dataset(dataset: Dataset, root: str | Path, data_split: DataSplit | None = None) -> Path:
    """Write a ``root/<domain>/<class>/<id>.png`` tree plus ``manifest.json``."""
    from PIL import Image

    root = Path(root)
    if dataset.precomputed:
        raise DatasetError("precomputed datasets are written with write_feature_table")
    split_names = data_split.name_of(len(dataset)) if data_split is not None else [""] * len(dataset)
    entries = []
    for i in range(len(dataset)):
        d, c = DOMAINS[dataset.domain[i]], CLASSES[dataset.y[i]]
        rel = Path(d) / c / f"{dataset.ids[i]}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        pix = np.round(np.clip(dataset.x[i, 0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pix, mode="L").save(root / rel)
        entries.append({"id": dataset.ids[i], "path": rel.as_posix(), "class": c, "domain": d,
                        "split": split_names[i]})
    manifest = {"samples": entries}
    if data_split is not None:
        manifest["split_seed"] = data_split.seed
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return arr[None]


def ingest(path: str | Path) -> tuple[Dataset, DataSplit | None]:
    """Load an image tree (with or without manifest) or a feature table.

    Returns the dataset and, when a manifest records one, its split.
    """
    path = Path(path)
    if path.is_file():
        if path.suffix == ".csv":
            return read_feature_table(path), None
        if path.suffix == ".npz":
            return _read_npz(path), None
        raise DatasetError(f"unsupported dataset file {path}")
    if not path.is_dir():
        raise DatasetError(f"dataset path {path} does not exist")
    manifest = path / "manifest.json"
    if manifest.exists():
        return _ingest_manifest(path, json.loads(manifest.read_text()))
    return _ingest_tree(path), None


def _ingest_manifest(root: Path, manifest: dict):
    xs, ys, ds, ids, splits, problems = [], [], [], [], [], []
    for entry in manifest.get("samples", []):
        try:
            c = class_index(entry["class"])
            d = domain_index(entry["domain"])
            if Path(entry["path"]).parts[:2] != (DOMAINS[d], CLASSES[c]):
                raise DatasetError(f"path {entry['path']} disagrees with labels {entry['domain']}/{entry['class']}")
            xs.append(_load_png(root / entry["path"]))
        except (DatasetError, OSError, KeyError) as exc:
            problems.append(f"{entry.get('path', entry)}: {exc}")
            continue
        ys.append(c)
        ds.append(d)
        ids.append(entry["id"])
        splits.append(entry.get("split", ""))
    if problems:
        raise DatasetError(f"{len(problems)} manifest entries could not be loaded", problems)
    _check_shapes(xs, ids)
    ds_ = Dataset(np.stack(xs), np.array(ys), np.array(ds), ids)
    data_split = None
    if any(splits):
        arr = np.array(splits)
        data_split = DataSplit(np.flatnonzero(arr == "train"), np.flatnonzero(arr == "val"),
                               np.flatnonzero(arr == "test"), int(manifest.get("split_seed", 0)))
    return ds_, data_split


def _ingest_tree(root: Path) -> Dataset:
    xs, ys, ds, ids, problems = [], [], [], [], []
    for d_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            d = domain_index(d_dir.name)
        except DatasetError as exc:
            problems.append(f"{d_dir}: {exc}")
            continue
        for c_dir in sorted(p for p in d_dir.iterdir() if p.is_dir()):
            try:
                c = class_index(c_dir.name)
            except DatasetError as exc:
                problems.append(f"{c_dir}: {exc}")
                continue
            files = sorted(c_dir.glob("*.png"))
            if not files:
                problems.append(f"{c_dir}: empty class directory")
            for f in files:
                try:
                    xs.append(_load_png(f))
                except OSError as exc:
                    problems.append(f"{f}: unreadable ({exc})")
                    continue
                ys.append(c)
                ds.append(d)
                ids.append(f.stem)
    if problems:
        raise DatasetError(f"{len(problems)} problems in image tree {root}", problems)
    if not xs:
        raise DatasetError(f"no images found under {root}")
    _check_shapes(xs, ids)
    return Dataset(np.stack(xs), np.array(ys), np.array(ds), ids)


def _check_shapes(xs, ids):
    shapes = {x.shape for x in xs}
    if len(shapes) > 1:
        ref = xs[0].shape
        bad = [f"{i}: shape {x.shape} != {ref}" for i, x in zip(ids, xs) if x.shape != ref]
        raise DatasetError("images differ in size", bad)


def write_feature_table(dataset: Dataset, path: str | Path) -> Path:
    """CSV with header ``f0..f{d-1},class,domain`` (plus an ``id`` column)."""
    path = Path(path)
    feats = dataset.x.reshape(len(dataset), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(feats.shape[1])] + ["class", "domain", "id"])
        for i in range(len(dataset)):
            w.writerow([repr(float(v)) for v in feats[i]] + [CLASSES[dataset.y[i]], DOMAINS[dataset.domain[i]],
                                                            dataset.ids[i]])
    return path


def read_feature_table(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DatasetError(f"{path}: empty feature table")
        fcols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        if not fcols or "class" not in header:
            raise DatasetError(f"{path}: header needs f0..f<d-1> and class columns")
        ci = header.index("class")
        di = header.index("domain") if "domain" in header else None
        ii = header.index("id") if "id" in header else None
        feats, ys, ds, ids, problems = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                feats.append([float(row[i]) for i in fcols])
                ys.append(class_index(row[ci]))
                ds.append(domain_index(row[di]) if di is not None else 0)
            except (ValueError, IndexError) as exc:
                problems.append(f"line {lineno}: {exc}")
                continue
            ids.append(row[ii] if ii is not None else f"row{lineno - 2}")
    if problems:
        raise DatasetError(f"{path}: {len(problems)} bad rows", problems)
    if not feats:
        raise DatasetError(f"{path}: no rows")
    return Dataset(np.array(feats, np.float32), np.array(ys), np.array(ds), ids, precomputed=True)


def _read_npz(path: Path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        missing = {"features", "class"} - set(z.files)
        if missing:
            raise DatasetError(f"{path}: missing arrays {sorted(missing)}")
        feats = z["features"].astype(np.float32)
        ys = [class_index(str(c)) for c in z["class"]]
        ds = [domain_index(str(d)) for d in z["domain"]] if "domain" in z.files else [0] * len(ys)
    return Dataset(feats, np.array(ys), np.array(ds), [f"row{i}" for i in range(len(ys))], precomputed=True)
