"""End-to-end face recognition: datasets, splits, extraction, evaluation, reports.

The flow for one evaluation run is

    detect largest face -> crop -> resize -> bilateral filter -> ASURF
    -> codebook (train split) -> BoW/VLAD encoding -> classifier -> accuracy

Only classifier training and prediction are timed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import multiprocessing as mp
import re
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import aggregate, classify, detect, features
from .filter import BilateralParams, bilateral_filter
from .imaging import GrayImage, ImageError, Rect, read_image, resize, sniff_image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".pgm", ".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff"}
LAYOUTS = ("orl", "faces95", "faces96", "generic-dirs")
MAX_SKIP_FRACTION = 0.10


class PipelineError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class DatasetError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _tilts(text: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    if not vals:
        raise ValueError("empty tilt list")
    return vals


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of a run. Field names double as config-file keys."""

    # detection
    cascade: Optional[str] = None
    scale_factor: float = 1.1
    min_neighbors: int = 3
    min_size: int = 30
    # crop and filter
    crop_size: int = 128
    bf_sigma_spatial: float = 3.0
    bf_sigma_range: float = 0.1
    bf_radius: Optional[int] = None
    # features
    octaves: int = 4
    levels: int = 4
    surf_threshold: float = 1e-4
    upright: bool = False
    max_keypoints: int = 500
    tilts: tuple = features.DEFAULT_TILTS
    # encoding
    aggregator: str = "vlad"
    k: Optional[int] = None
    kmeans_max_iters: int = 100
    vocab_all_images: bool = False
    # classifier
    classifier: str = "forest"
    trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    mtry: Optional[int] = None
    bootstrap: bool = True
    knn_k: int = 5
    threads: int = 1
    # split and seeding
    train_fraction: float = 0.7
    stratified: bool = True
    no_split: bool = False
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.aggregator not in ("bow", "vlad"):
            raise ConfigError(f"aggregator must be bow or vlad, got {self.aggregator!r}")
        if self.classifier not in ("forest", "knn"):
            raise ConfigError(f"classifier must be forest or knn, got {self.classifier!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.crop_size < 24:
            raise ConfigError("crop_size must be >= 24")
        if self.threads < 1 or self.jobs < 1:
            raise ConfigError("threads and jobs must be >= 1")
        if self.cascade is not None and not Path(self.cascade).is_file():
            raise ConfigError(f"cascade file not found: {self.cascade}")
        object.__setattr__(self, "tilts", tuple(float(t) for t in self.tilts))
        # build sub-params now so invalid values fail early
        self.detect_params()
        self.bilateral_params()
        self.surf_params()
        self.forest_params()
        classify.KnnParams(self.knn_k)

    @property
    def vocab_size(self) -> int:
        if self.k is not None:
            return self.k
        return 64 if self.aggregator == "vlad" else 128

    def detect_params(self) -> detect.DetectParams:
        return detect.DetectParams(self.scale_factor, self.min_neighbors, self.min_size)

    def bilateral_params(self) -> BilateralParams:
        return BilateralParams(self.bf_sigma_spatial, self.bf_sigma_range, self.bf_radius)

    def surf_params(self) -> features.SurfParams:
        return features.SurfParams(self.octaves, self.levels, self.surf_threshold,
                                   self.upright, self.max_keypoints)

    def view_grid(self) -> list[tuple[float, float]]:
        return features.default_view_grid(self.tilts)

    def forest_params(self) -> classify.ForestParams:
        return classify.ForestParams(
            n_trees=self.trees,
            max_depth=self.max_depth,
            min_samples_split=self.min_samples_split,
            mtry=self.mtry,
            bootstrap=self.bootstrap,
            seed=derive_seed(self.seed, "forest"),
        )

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Short digest of every setting that can change results.

        ``threads`` and ``jobs`` only change scheduling and are left out.
        """
        text = "\n".join(
            f"{f.name}={format_value(getattr(self, f.name))}"
            for f in dataclasses.fields(self)
            if f.name not in ("threads", "jobs")
        )
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(t)) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> dict:
    hints = typing.get_type_hints(PipelineConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(PipelineConfig)}


def parse_value(key: str, text: str):
    """Convert the text form of ``key`` to its typed value."""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    tp = types[key]
    text = text.strip()
    args = typing.get_args(tp)
    optional = type(None) in args
    if optional:
        if text.lower() in ("none", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp is tuple:
            return _tilts(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def normalise_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def read_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = normalise_key(key)
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return out


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> PipelineConfig:
    """Defaults, then the config file, then ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            values.update(read_config_text(p.read_text(), str(p)))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
    for key, value in overrides.items():
        key = normalise_key(key)
        if key not in _field_types():
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return PipelineConfig(**values)


def derive_seed(master: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    items: list  # (path, class id, class name)
    n_classes: int
    layout: str
    root: Optional[Path] = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c, _ in self.items], dtype=np.intp)

    @property
    def paths(self) -> list[Path]:
        return [p for p, _, _ in self.items]

    @property
    def class_names(self) -> list[str]:
        names = [""] * self.n_classes
        for _, c, n in self.items:
            names[c] = n
        return names

    @property
    def name(self) -> str:
        return self.root.name if self.root is not None else self.layout

    def __len__(self):
        return len(self.items)

    def subset(self, keep: Sequence[int]) -> "LabeledDataset":
        """Items at ``keep`` with the original class ids."""
        return LabeledDataset([self.items[i] for i in keep], self.n_classes, self.layout, self.root)


def _images_in(d: Path) -> list[Path]:
    return sorted(
        (p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def _class_dirs(root: Path, layout: str) -> dict[str, list[Path]]:
    if layout == "orl":
        dirs = [d for d in root.iterdir() if d.is_dir() and re.fullmatch(r"s\d+", d.name)]
        return {d.name: [p for p in _images_in(d) if p.suffix.lower() == ".pgm"] for d in dirs}
    if layout == "generic-dirs":
        return {d.name: _images_in(d) for d in root.iterdir() if d.is_dir()}
    # faces95/96 archives sometimes nest identities one or two levels deep
    found = {}
    for d in sorted(p for p in root.rglob("*") if p.is_dir()):
        imgs = _images_in(d)
        if imgs:
            found[d.relative_to(root).as_posix()] = imgs
    return found


def load_dataset(root: Union[str, Path], layout: str = "generic-dirs") -> LabeledDataset:
    """Enumerate a one-directory-per-identity dataset.

    Class ids follow the sorted class-directory names; images within a class
    are sorted by file name. Every image header is checked up front.
    """
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {', '.join(LAYOUTS)}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    classes = {n: imgs for n, imgs in _class_dirs(root, layout).items() if imgs}
    if not classes:
        raise DatasetError(f"no {layout} identity directories with images under {root}")
    items, bad = [], []
    for cid, name in enumerate(sorted(classes)):
        for p in classes[name]:
            try:
                sniff_image(p)
            except ImageError as exc:
                bad.append(f"{p}: {exc}")
                continue
            items.append((p, cid, name))
    if bad:
        listing = "\n  ".join(bad)
        raise DatasetError(f"{len(bad)} unreadable image(s) in {root}:\n  {listing}")
    logger.info("loaded %d images of %d classes from %s (%s)", len(items), len(classes), root, layout)
    return LabeledDataset(items, len(classes), layout, root)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.7
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


def _n_train(n: int, fraction: float) -> int:
    return min(n - 1, max(1, int(math.floor(fraction * n + 0.5))))


def train_test_split(labels, cfg: SplitConfig = SplitConfig(), class_names=None):
    """Disjoint sorted (train, test) index arrays.

    Stratified splits shuffle each class with its own seed stream and keep
    ``round(fraction * n_c)`` items of it, at least one on each side.
    """
    if isinstance(labels, LabeledDataset):
        class_names = labels.class_names
        labels = labels.labels
    y = np.asarray(labels)
    n = len(y)
    if n < 2:
        raise ConfigError("need at least two items to split")
    if not cfg.stratified:
        rng = np.random.default_rng(derive_seed(cfg.seed, "split"))
        perm = rng.permutation(n)
        k = _n_train(n, cfg.train_fraction)
        return np.sort(perm[:k]), np.sort(perm[k:])
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            name = class_names[c] if class_names is not None else str(c)
            raise ConfigError(f"class {name!r} has a single item; cannot stratify")
        rng = np.random.default_rng(derive_seed(cfg.seed, f"split:{int(c)}"))
        perm = idx[rng.permutation(len(idx))]
        k = _n_train(len(idx), cfg.train_fraction)
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# ---------------------------------------------------------------------------
# per-image extraction


@dataclass
class Extraction:
    descriptors: np.ndarray
    face: Optional[Rect]
    error: Optional[str] = None


_CASCADES: dict = {}


def cascade_for(cfg: PipelineConfig) -> detect.CascadeModel:
    key = cfg.cascade
    if key not in _CASCADES:
        _CASCADES[key] = (
            detect.load_default_cascade() if key is None else detect.load_cascade(Path(key))
        )
    return _CASCADES[key]


def face_crop(img: GrayImage, cfg: PipelineConfig, model=None) -> tuple[GrayImage, Optional[Rect]]:
    """Largest detected face resized to the crop size; whole frame if none."""
    model = model or cascade_for(cfg)
    face = detect.largest_face(img, model, cfg.detect_params())
    region = img.crop(face) if face is not None else img
    return resize(region, cfg.crop_size, cfg.crop_size), face


def preprocess(img: GrayImage, cfg: PipelineConfig, model=None) -> tuple[GrayImage, Optional[Rect]]:
    crop, face = face_crop(img, cfg, model)
    return bilateral_filter(crop, cfg.bilateral_params()), face


def _extract(path, cfg: PipelineConfig) -> Extraction:
    try:
        img = read_image(path)
    except ImageError as exc:
        return Extraction(np.zeros((0, features.DESCRIPTOR_DIM)), None, str(exc))
    filtered, face = preprocess(img, cfg)
    if face is None:
        logger.info("no face found in %s; using the full frame", path)
    _, desc = features.asurf_extract(filtered, cfg.view_grid(), cfg.surf_params())
    return Extraction(desc, face)


def extract_image_descriptor_set(path, cfg: PipelineConfig = PipelineConfig()) -> np.ndarray:
    """ASURF descriptors of the filtered face crop, shape ``(n, 64)``.

    Raises :class:`ImageError` for unreadable files.
    """
    ex = _extract(path, cfg)
    if ex.error is not None:
        raise ImageError(ex.error)
    return ex.descriptors


def _extract_star(args):
    return _extract(*args)


def extract_all(dataset: LabeledDataset, cfg: PipelineConfig) -> list[Extraction]:
    """Per-image extraction in dataset order, optionally over ``cfg.jobs`` processes."""
    t0 = time.perf_counter()
    tasks = [(p, cfg) for p in dataset.paths]
    if cfg.jobs > 1 and len(tasks) > 1:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
        with ProcessPoolExecutor(cfg.jobs, mp_context=ctx) as pool:
            out = list(pool.map(_extract_star, tasks, chunksize=4))
    else:
        out = [_extract(*t) for t in tasks]
    n_desc = sum(len(e.descriptors) for e in out)
    n_face = sum(e.face is not None for e in out)
    logger.info(
        "extracted %d descriptors from %d images (%d with a detected face) in %.1fs",
        n_desc, len(out), n_face, time.perf_counter() - t0,
    )
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EncodedData:
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    codebook: aggregate.Codebook
    paths: list = field(default_factory=list)


@dataclass
class ReportRow:
    dataset: str
    aggregator: str
    classifier: str
    threads: int
    accuracy: float
    train_s: float
    test_s: float
    config_hash: str

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.train_s < 0 or self.test_s < 0:
            raise ValueError("times must be >= 0")


@dataclass
class RunResult:
    row: ReportRow
    encoded: EncodedData
    model: object
    predictions: np.ndarray


def get_accuracy(true_labels, predicted_labels) -> float:
    """Fraction of positions where prediction equals truth."""
    t = list(true_labels)
    p = list(predicted_labels)
    if len(t) != len(p):
        raise ValueError(f"length mismatch: {len(t)} labels vs {len(p)} predictions")
    if not t:
        raise ValueError("cannot score an empty label sequence")
    return sum(a == b for a, b in zip(t, p)) / len(t)


def _usable(dataset: LabeledDataset, extractions: list[Extraction]) -> list[int]:
    failed = [i for i, e in enumerate(extractions) if e.error is not None]
    if failed:
        for i in failed:
            logger.warning("skipping %s: %s", dataset.items[i][0], extractions[i].error)
        if len(failed) > MAX_SKIP_FRACTION * len(dataset):
            raise PipelineError(
                f"{len(failed)} of {len(dataset)} images failed extraction "
                f"(limit {MAX_SKIP_FRACTION:.0%}); aborting"
            )
    return [i for i, e in enumerate(extractions) if e.error is None]


def resolve_split(dataset: LabeledDataset, cfg: PipelineConfig, keep: Sequence[int],
                  train_paths=None):
    """Train/test indices into ``dataset``.

    ``train_paths`` pins the training set explicitly; everything else kept
    becomes test data.
    """
    keep = np.asarray(keep, dtype=np.intp)
    if cfg.no_split:
        return keep.copy(), keep.copy()
    if train_paths is not None:
        pinned = {str(Path(p)) for p in train_paths}
        is_train = np.array([str(dataset.items[i][0]) in pinned for i in keep], dtype=bool)
        return keep[is_train], keep[~is_train]
    labels = dataset.labels[keep]
    tr, te = train_test_split(
        labels, SplitConfig(cfg.train_fraction, cfg.stratified, cfg.seed), dataset.class_names
    )
    return keep[tr], keep[te]


def build_vocabulary(extractions, indices, cfg: PipelineConfig) -> aggregate.Codebook:
    parts = [extractions[i].descriptors for i in indices]
    pool = np.concatenate(parts) if parts else np.zeros((0, features.DESCRIPTOR_DIM))
    if len(pool) < cfg.vocab_size:
        raise PipelineError(
            f"only {len(pool)} descriptors available for a {cfg.vocab_size}-word vocabulary"
        )
    t0 = time.perf_counter()
    cb = aggregate.kmeans_train(pool, cfg.vocab_size, cfg.kmeans_max_iters,
                                derive_seed(cfg.seed, "vocab"))
    logger.info("trained %d-word vocabulary on %d descriptors in %.1fs (%d iterations)",
                cb.k, len(pool), time.perf_counter() - t0, cb.iterations)
    return cb


def encode_dataset(dataset: LabeledDataset, extractions, cfg: PipelineConfig,
                   train_paths=None, codebook=None) -> EncodedData:
    keep = _usable(dataset, extractions)
    train_idx, test_idx = resolve_split(dataset, cfg, keep, train_paths)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise PipelineError("split produced an empty train or test set")
    if codebook is None:
        vocab_from = keep if cfg.vocab_all_images else train_idx
        codebook = build_vocabulary(extractions, vocab_from, cfg)
    X = np.zeros((len(dataset), codebook.k * (codebook.dim if cfg.aggregator == "vlad" else 1)))
    for i in keep:
        X[i] = aggregate.encode(cfg.aggregator, codebook, extractions[i].descriptors)
    return EncodedData(X, dataset.labels, train_idx, test_idx, codebook, dataset.paths)


def fit(X, y, cfg: PipelineConfig, n_classes: Optional[int] = None):
    if cfg.classifier == "forest":
        return classify.train_forest(X, y, cfg.forest_params(), cfg.threads, n_classes)
    classify.KnnParams(cfg.knn_k)
    return KnnModel(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.intp), cfg.knn_k)


@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int

    def predict(self, Q) -> np.ndarray:
        return classify.knn_predict(self.X, self.y, classify.KnnParams(self.k), Q)


def predict_with(model, X) -> np.ndarray:
    if isinstance(model, classify.Forest):
        return classify.predict(model, X)
    return model.predict(X)


def fit_and_score(enc: EncodedData, cfg: PipelineConfig, dataset_name: str,
                  n_classes: Optional[int] = None) -> RunResult:
    Xtr, ytr = enc.X[enc.train_idx], enc.y[enc.train_idx]
    Xte, yte = enc.X[enc.test_idx], enc.y[enc.test_idx]
    if n_classes is None:
        n_classes = int(enc.y.max()) + 1
    t0 = time.perf_counter()
    model = fit(Xtr, ytr, cfg, n_classes)
    t1 = time.perf_counter()
    pred = predict_with(model, Xte)
    t2 = time.perf_counter()
    acc = get_accuracy(yte.tolist(), pred.tolist())
    row = ReportRow(dataset_name, cfg.aggregator, cfg.classifier, cfg.threads, acc,
                    t1 - t0, t2 - t1, cfg.config_hash())
    logger.info("%s %s/%s threads=%d accuracy=%.4f train=%.2fs test=%.2fs", dataset_name,
                cfg.aggregator, cfg.classifier, cfg.threads, acc, row.train_s, row.test_s)
    return RunResult(row, enc, model, pred)


def run_face_recognition(dataset: LabeledDataset, cfg: PipelineConfig = PipelineConfig(),
                         extractions: Optional[list] = None, train_paths=None,
                         dataset_name: Optional[str] = None) -> RunResult:
    """Extract, encode, train, predict and score one configuration.

    ``extractions`` lets callers reuse descriptors across runs that differ
    only in encoding or classifier settings.
    """
    if extractions is None:
        extractions = extract_all(dataset, cfg)
    enc = encode_dataset(dataset, extractions, cfg, train_paths)
    return fit_and_score(enc, cfg, dataset_name or dataset.name, dataset.n_classes)


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = ("dataset", "aggregator", "classifier", "threads", "accuracy_pct",
               "train_s", "test_s", "config_hash")


def _csv_record(r: ReportRow) -> list[str]:
    return [r.dataset, r.aggregator, r.classifier, str(r.threads), f"{100 * r.accuracy:.2f}",
            f"{r.train_s:.4f}", f"{r.test_s:.4f}", r.config_hash]


def display_classifier(r: ReportRow) -> str:
    if r.classifier == "knn":
        return "kNN"
    return "Cloud Forest" if r.threads > 1 else "Random Forest"


def _pretty(rows: Sequence[ReportRow]) -> str:
    clfs = list(dict.fromkeys(display_classifier(r) for r in rows))
    keys = list(dict.fromkeys((r.dataset, r.aggregator.upper()) for r in rows))
    cell: dict = {}
    for r in rows:
        cell[(r.dataset, r.aggregator.upper(), display_classifier(r))] = r

    def table(title, fmt):
        head = ["Dataset", "Encoding"] + clfs
        body = [
            [d, a] + [fmt(cell[(d, a, c)]) if (d, a, c) in cell else "-" for c in clfs]
            for d, a in keys
        ]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

        def fmt_row(vals):
            return "| " + " | ".join(v.ljust(w) for v, w in zip(vals, widths)) + " |"

        return "\n".join([title, line, fmt_row(head), line, *map(fmt_row, body), line])

    acc = table("Accuracy (%)", lambda r: f"{100 * r.accuracy:.2f}")
    tim = table("Time (s, train / test)", lambda r: f"{r.train_s:.2f} / {r.test_s:.2f}")
    return acc + "\n\n" + tim + "\n"


def emit_report(rows: Sequence[ReportRow], fmt: str = "csv") -> bytes:
    rows = list(rows)
    if not rows:
        raise ValueError("report needs at least one row")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(_csv_record(r) for r in rows)
        return buf.getvalue().encode()
    if fmt in ("pretty", "pretty-table", "table"):
        return _pretty(rows).encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(data: Union[bytes, str]) -> list[ReportRow]:
    """Inverse of the CSV form of :func:`emit_report` at its printed precision."""
    text = data.decode() if isinstance(data, bytes) else data
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected report columns {reader.fieldnames}")
    return [
        ReportRow(
            rec["dataset"], rec["aggregator"], rec["classifier"], int(rec["threads"]),
            float(rec["accuracy_pct"]) / 100.0, float(rec["train_s"]), float(rec["test_s"]),
            rec["config_hash"],
        )
        for rec in reader
    ]


# ---------------------------------------------------------------------------
# table reproduction


def table_matrix(all_threads: int) -> list[dict]:
    """Aggregator x classifier settings for the accuracy and timing tables."""
    out = []
    for agg in ("bow", "vlad"):
        out.append(dict(aggregator=agg, classifier="forest", threads=all_threads))
        out.append(dict(aggregator=agg, classifier="forest", threads=1))
        out.append(dict(aggregator=agg, classifier="knn", threads=1))
    return out


def reproduce_tables(datasets: dict, cfg: PipelineConfig, all_threads: int) -> list[ReportRow]:
    """Every matrix cell for each ``name -> (root, layout)`` dataset.

    Descriptors are extracted once per dataset and each vocabulary is shared
    by the classifiers that use it.
    """
    rows = []
    for name, (root, layout) in datasets.items():
        ds = load_dataset(root, layout)
        ex = extract_all(ds, cfg)
        encoded: dict = {}
        for cell in table_matrix(all_threads):
            c = cfg.replace(**cell)
            if c.aggregator not in encoded:
                encoded[c.aggregator] = encode_dataset(ds, ex, c)
            rows.append(fit_and_score(encoded[c.aggregator], c, name, ds.n_classes).row)
    return rows
