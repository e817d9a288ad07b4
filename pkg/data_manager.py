import os
import csv
import gzip
import struct
import hashlib
import logging
from dataclasses import dataclass
from typing import Any, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from numerics import Rng
from utils import DimensionError, DomainError, FormatError, ParameterError, SampleLookupError

TAG_LABELED = "labeled"
TAG_UNLABELED = "unlabeled"
TAG_TEST = "test"
TAGS = (TAG_LABELED, TAG_UNLABELED, TAG_TEST)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class Dataset:
    """Immutable sample table. Tags are None until subsample_labels assigns them."""
    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    tags: Optional[np.ndarray] = None
    grid_shape: Optional[Tuple[int, int]] = None # (rows, cols) for image inputs

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if not (len(inputs) == len(labels) == len(ids)):
            raise DimensionError(f"Dataset columns disagree: {len(inputs)} inputs, {len(labels)} labels, {len(ids)} ids.")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DimensionError(f"Labels must be class indices below {self.num_classes}.")
        if len(np.unique(ids)) != len(ids):
            raise DimensionError("Sample ids must be unique.")
        if self.grid_shape is not None and self.grid_shape[0] * self.grid_shape[1] != inputs.shape[1]:
            raise DimensionError(f"Grid shape {self.grid_shape} does not match input dimension {inputs.shape[1]}.")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        if self.tags is not None:
            tags = np.asarray(self.tags, dtype=object).reshape(-1)
            if len(tags) != len(ids) or any(tag not in TAGS for tag in tags):
                raise DimensionError(f"Every sample needs exactly one tag out of {TAGS}.")
            object.__setattr__(self, "tags", tags)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def with_tags(self, tags):
        return Dataset(self.inputs, self.labels, self.ids, self.num_classes, tags, self.grid_shape)

    def subset(self, mask):
        tags = None if self.tags is None else self.tags[mask]
        return Dataset(self.inputs[mask], self.labels[mask], self.ids[mask], self.num_classes, tags, self.grid_shape)


class SplitSpec(BaseModel):
    """How many labels to keep per class and how much to hold out for testing."""
    model_config = ConfigDict(extra="forbid")

    labels_per_class: Optional[int] = Field(None, ge=1)
    label_fraction: Optional[float] = Field(None, gt=0.0, le=1.0)
    test_fraction: float = Field(0.0, ge=0.0, lt=1.0)
    test_size: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _one_label_rule(self):
        if self.labels_per_class is not None and self.label_fraction is not None:
            raise ValueError("Set either labels_per_class or label_fraction, not both.")
        if self.labels_per_class is None and self.label_fraction is None:
            self.labels_per_class = 4
        if self.test_size is not None and self.test_fraction > 0.0:
            raise ValueError("Set either test_size or test_fraction, not both.")
        return self

    def labels_for_class(self, count):
        if self.labels_per_class is not None:
            return self.labels_per_class
        return max(1, int(round(self.label_fraction * count)))

    def test_count(self, total):
        if self.test_size is not None:
            return self.test_size
        return int(round(self.test_fraction * total))


class LabelVault:
    """
    Holds the true labels of unlabeled samples. Only the impurity diagnostics
    read from it; loss code is handed an UnlabeledPool, which has no labels.
    """

    def __init__(self, ids, labels):
        self._labels = {int(i): int(y) for i, y in zip(np.asarray(ids), np.asarray(labels))}

    def __len__(self):
        return len(self._labels)

    def __repr__(self):
        return f"LabelVault({len(self)} hidden labels)"

    def labels_for(self, ids):
        try:
            return np.fromiter((self._labels[int(i)] for i in np.atleast_1d(ids)), dtype=np.int64)
        except KeyError as e:
            raise SampleLookupError(f"No hidden label for sample id {e.args[0]}.") from None


@dataclass(frozen=True)
class LabeledPool:
    ids: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)

    def take(self, positions):
        return LabeledPool(self.ids[positions], self.inputs[positions], self.labels[positions])


@dataclass(frozen=True)
class UnlabeledPool:
    ids: np.ndarray
    inputs: np.ndarray

    def __len__(self):
        return len(self.ids)

    def take(self, positions):
        return UnlabeledPool(self.ids[positions], self.inputs[positions])


@dataclass(frozen=True)
class SemiSupervisedData:
    labeled: LabeledPool
    unlabeled: UnlabeledPool
    test: LabeledPool
    vault: LabelVault
    num_classes: int
    grid_shape: Optional[Tuple[int, int]] = None

    @classmethod
    def from_tagged(cls, ds, test=None):
        """
        Separate a tagged dataset into pools. ``test`` (an untagged Dataset)
        replaces the tagged test split when the test set comes from a separate draw or file.
        """
        if ds.tags is None:
            raise DomainError("Dataset has no split tags; run subsample_labels first.")
        lab = ds.tags == TAG_LABELED
        unl = ds.tags == TAG_UNLABELED
        tst = ds.tags == TAG_TEST
        if test is not None:
            if np.any(tst):
                raise DomainError("Dataset already holds a test split; a separate test set is ambiguous.")
            if test.dim != ds.dim:
                raise DimensionError(f"Test inputs have dimension {test.dim}, training inputs {ds.dim}.")
            test_pool = LabeledPool(test.ids, test.inputs, test.labels)
        else:
            test_pool = LabeledPool(ds.ids[tst], ds.inputs[tst], ds.labels[tst])
        return cls(labeled=LabeledPool(ds.ids[lab], ds.inputs[lab], ds.labels[lab]),
                   unlabeled=UnlabeledPool(ds.ids[unl], ds.inputs[unl]),
                   test=test_pool,
                   vault=LabelVault(ds.ids[unl], ds.labels[unl]),
                   num_classes=ds.num_classes,
                   grid_shape=ds.grid_shape)

    @property
    def dim(self):
        return self.labeled.inputs.shape[1]

    def train_feature_std(self):
        """Per-feature standard deviation over labeled and unlabeled inputs."""
        train = np.vstack([self.labeled.inputs, self.unlabeled.inputs])
        return train.std(axis=0)

    def fingerprint(self):
        """SHA-256 over the ids of each split; equal hashes mean identical splits."""
        digest = hashlib.sha256()
        for tag, ids in ((TAG_LABELED, self.labeled.ids), (TAG_UNLABELED, self.unlabeled.ids),
                         (TAG_TEST, self.test.ids)):
            digest.update(tag.encode("utf-8"))
            digest.update(np.sort(np.asarray(ids, dtype=np.int64)).astype("<i8").tobytes())
        return digest.hexdigest()


# --- Generators ---
def _covariance_transform(cov, dim, cls):
    """Matrix A with A A^T = cov. Accepts a scalar variance, a diagonal (D,) or a full (D, D) matrix."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.full(dim, float(cov))
    if cov.ndim == 1:
        if cov.shape != (dim,) or np.any(cov < 0) or not np.all(np.isfinite(cov)):
            raise ParameterError(f"Class {cls}: diagonal covariance must be {dim} non-negative values.")
        return np.diag(np.sqrt(cov))
    if cov.shape != (dim, dim) or not np.all(np.isfinite(cov)):
        raise ParameterError(f"Class {cls}: covariance must be a ({dim}, {dim}) matrix, got {cov.shape}.")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ParameterError(f"Class {cls}: covariance matrix is not symmetric.")
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10:
        raise ParameterError(f"Class {cls}: covariance matrix is not positive semi-definite.")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def gen_gaussian_classes(num_classes, dim, n_samples, rng, means=None, covariances=None,
                         separation=2.0, spread=1.0, id_offset=0):
    """
    Draw a balanced Gaussian mixture, one component per class.

    Args:
        means: (C, D) class means. Default puts class c at ``separation`` along axis c mod D.
        covariances: one entry per class (scalar variance, diagonal or full matrix).
            Default is ``spread``**2 times the identity.
        n_samples: total count; the first n mod C classes get one extra sample.
    Raises: ParameterError for invalid covariances or sizes.
    """
    if num_classes < 2 or dim < 1 or n_samples < num_classes:
        raise ParameterError(f"Need C >= 2, D >= 1 and at least one sample per class (C={num_classes}, D={dim}, n={n_samples}).")
    if means is None:
        means = np.zeros((num_classes, dim))
        means[np.arange(num_classes), np.arange(num_classes) % dim] = separation
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (num_classes, dim):
        raise ParameterError(f"Means must have shape ({num_classes}, {dim}), got {means.shape}.")
    if covariances is None:
        covariances = [spread ** 2] * num_classes
    if len(covariances) != num_classes:
        raise ParameterError(f"Expected {num_classes} covariances, got {len(covariances)}.")
    transforms = [_covariance_transform(cov, dim, c) for c, cov in enumerate(covariances)]

    base, extra = divmod(int(n_samples), num_classes)
    inputs, labels = [], []
    for c in range(num_classes):
        count = base + (1 if c < extra else 0)
        z = rng.normal(size=(count, dim))
        inputs.append(means[c] + z @ transforms[c].T)
        labels.append(np.full(count, c, dtype=np.int64))
    logging.debug(f"Generated {n_samples} Gaussian samples over {num_classes} classes in {dim} dims.")
    return Dataset(np.vstack(inputs), np.concatenate(labels),
                   np.arange(id_offset, id_offset + n_samples), num_classes)


def gen_two_moons(n_samples, noise, rng, id_offset=0):
    """
    Two interleaved half-circles: class 0 on the unit upper half-circle,
    class 1 on the lower half-circle centred at (1, 0.5).
    """
    if noise < 0:
        raise ParameterError(f"Noise must be >= 0, got {noise}.")
    if n_samples < 2:
        raise ParameterError(f"Two moons needs at least 2 samples, got {n_samples}.")
    n_outer = n_samples // 2
    n_inner = n_samples - n_outer
    outer = np.linspace(0.0, np.pi, n_outer)
    inner = np.linspace(0.0, np.pi, n_inner)
    x = np.vstack([np.column_stack([np.cos(outer), np.sin(outer)]),
                   np.column_stack([1.0 - np.cos(inner), 0.5 - np.sin(inner)])])
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return Dataset(x, y, np.arange(id_offset, id_offset + n_samples), 2)


# --- Splitting ---
def subsample_labels(ds, spec):
    """
    Tag every sample labeled, unlabeled or test. The test split is drawn first
    (uniformly over the whole dataset), then each class keeps exactly n labels
    chosen uniformly; the rest are unlabeled. Deterministic in ``spec.seed``.
    Raises: DomainError naming the first class with fewer than n training samples.
    """
    rng = Rng(spec.seed)
    n = len(ds)
    n_test = spec.test_count(n)
    if n_test >= n:
        raise DomainError(f"Test split of {n_test} leaves no training samples out of {n}.")
    tags = np.full(n, TAG_UNLABELED, dtype=object)
    order = rng.permutation(n)
    tags[order[:n_test]] = TAG_TEST

    train_positions = np.sort(order[n_test:])
    for c in range(ds.num_classes):
        members = train_positions[ds.labels[train_positions] == c]
        wanted = spec.labels_for_class(len(members))
        if len(members) < wanted:
            raise DomainError(f"Class {c} has {len(members)} training samples; {wanted} labels requested.")
        chosen = members[rng.permutation(len(members))[:wanted]]
        tags[chosen] = TAG_LABELED
    counts = {tag: int(np.count_nonzero(tags == tag)) for tag in TAGS}
    logging.info(f"Split {n} samples: {counts[TAG_LABELED]} labeled, {counts[TAG_UNLABELED]} unlabeled, {counts[TAG_TEST]} test.")
    return ds.with_tags(tags)


# --- Loaders ---
def load_csv(path):
    """
    Read a CSV with a header row; every column but the last is a feature and
    the last is an integer class label. Numbers use '.' as decimal point.
    Raises: FormatError with the offending line number.
    """
    inputs, labels = [], []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header:
                raise FormatError(f"{path}: line 1: missing header row.")
            width = len(header)
            if width < 2:
                raise FormatError(f"{path}: line 1: need at least one feature column and a label column.")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != width:
                    raise FormatError(f"{path}: line {line}: expected {width} fields, got {len(row)}.")
                try:
                    features = [float(v) for v in row[:-1]]
                    label = int(row[-1])
                except ValueError as e:
                    raise FormatError(f"{path}: line {line}: {e}") from None
                if not np.all(np.isfinite(features)):
                    raise FormatError(f"{path}: line {line}: non-finite feature value in {row[:-1]}.")
                if label < 0:
                    raise FormatError(f"{path}: line {line}: negative class label {label}.")
                inputs.append(features)
                labels.append(label)
    except OSError as e:
        raise FormatError(f"Cannot read CSV '{path}': {e}") from e
    if not labels:
        raise FormatError(f"{path}: no data rows after the header.")
    labels = np.asarray(labels, dtype=np.int64)
    logging.info(f"Loaded {len(labels)} rows from CSV: {path}")
    return Dataset(np.asarray(inputs), labels, np.arange(len(labels)), max(2, int(labels.max()) + 1))


def _read_maybe_gzip(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise FormatError(f"Cannot read IDX file '{path}': {e}") from e
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: corrupt gzip stream: {e}") from e
    return raw


def _idx_header(raw, path, magic, ndims):
    """Returns the big-endian dimension sizes following ``magic``."""
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at byte offset {len(raw)} (need 4-byte magic).")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0 (expected 0x{magic:08x}).")
    end = 4 + 4 * ndims
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need {end} bytes).")
    return struct.unpack(f">{ndims}I", raw[4:end]), end


def load_idx(images_path, labels_path, id_offset=0):
    """
    Read an IDX image file (0x00000803) and its label file (0x00000801),
    plain or gzip-compressed. Pixels are scaled from 0..255 to [0, 1].
    Raises: FormatError with the byte offset of the problem.
    """
    img_raw = _read_maybe_gzip(images_path)
    lab_raw = _read_maybe_gzip(labels_path)
    (n_images, rows, cols), img_start = _idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), lab_start = _idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC, 1)

    pixels = n_images * rows * cols
    if len(img_raw) - img_start != pixels:
        raise FormatError(f"{images_path}: {len(img_raw) - img_start} pixel bytes from offset {img_start}, "
                          f"header declares {pixels} (mismatch at byte offset {min(len(img_raw), img_start + pixels)}).")
    if len(lab_raw) - lab_start != n_labels:
        raise FormatError(f"{labels_path}: {len(lab_raw) - lab_start} label bytes from offset {lab_start}, "
                          f"header declares {n_labels} (mismatch at byte offset {min(len(lab_raw), lab_start + n_labels)}).")
    if n_images != n_labels:
        raise FormatError(f"{images_path} declares {n_images} images but {labels_path} declares {n_labels} labels (byte offset 4).")

    images = np.frombuffer(img_raw, dtype=np.uint8, offset=img_start).reshape(n_images, rows * cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=lab_start).astype(np.int64)
    num_classes = max(2, int(labels.max()) + 1) if n_labels else 2
    logging.info(f"Loaded {n_images} IDX images of {rows}x{cols} from {images_path}")
    return Dataset(images.astype(np.float64) / 255.0, labels, np.arange(id_offset, id_offset + n_images),
                   num_classes, grid_shape=(rows, cols))


# --- Batching ---
def iterate_batches(data, labeled_batch_size, unlabeled_batch_size, rng, require_unlabeled=True):
    """
    Endless stream of (LabeledPool, UnlabeledPool) batches.

    Labeled batches are drawn with replacement. Unlabeled batches are
    consecutive chunks of a fresh permutation each epoch, so every unlabeled
    id appears exactly once per epoch; the last chunk of an epoch may be short.
    With ``require_unlabeled=False`` an empty unlabeled pool yields empty batches.
    Raises: DomainError for an empty split.
    """
    n_l, n_u = len(data.labeled), len(data.unlabeled)
    if n_l == 0:
        raise DomainError("Labeled split is empty; cannot draw labeled batches.")
    if n_u == 0 and require_unlabeled:
        raise DomainError("Unlabeled split is empty; cannot draw unlabeled batches.")
    if labeled_batch_size < 1 or unlabeled_batch_size < 1:
        raise ParameterError("Batch sizes must be >= 1.")
    empty = np.zeros(0, dtype=np.int64)
    order, cursor = empty, 0
    while True:
        labeled = data.labeled.take(rng.integers(n_l, size=labeled_batch_size))
        if n_u == 0:
            yield labeled, data.unlabeled.take(empty)
            continue
        if cursor >= len(order):
            order, cursor = rng.permutation(n_u), 0
        chunk = order[cursor:cursor + unlabeled_batch_size]
        cursor += unlabeled_batch_size
        yield labeled, data.unlabeled.take(chunk)


# --- Config-driven construction ---
class DatasetConfig(BaseModel):
    """Dataset block of an experiment config."""
    model_config = ConfigDict(extra="forbid")

    source: Literal["gaussian", "two-moons", "csv", "idx"] = "gaussian"
    num_classes: int = Field(3, ge=2)
    dim: int = Field(8, ge=1)
    n_samples: int = Field(600, ge=2)
    test_samples: Optional[int] = Field(None, ge=1) # separate test draw for generators
    separation: float = 2.0
    spread: float = Field(1.0, ge=0.0)
    means: Optional[List[List[float]]] = None
    covariances: Optional[List[Any]] = None
    noise: float = Field(0.1, ge=0.0)
    path: Optional[str] = None
    labels_path: Optional[str] = None
    test_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    seed: int = Field(0, ge=0) # generator seed; the split has its own
    split: SplitSpec = Field(default_factory=SplitSpec)

    @model_validator(mode="after")
    def _check_files(self):
        if self.source in ("csv", "idx") and not self.path:
            raise ValueError(f"source '{self.source}' needs 'path'.")
        if self.source == "idx" and not self.labels_path:
            raise ValueError("source 'idx' needs 'labels_path'.")
        if self.source == "idx" and bool(self.test_path) != bool(self.test_labels_path):
            raise ValueError("IDX test files need both 'test_path' and 'test_labels_path'.")
        for name in ("path", "labels_path", "test_path", "test_labels_path"):
            value = getattr(self, name)
            if value and not os.path.isfile(value):
                raise ValueError(f"{name} '{value}' does not exist.")
        return self


class DataManager:
    """Builds the semi-supervised splits an experiment trains on."""

    def __init__(self, config):
        self.config = config
        self._data = None

    def load_dataset(self):
        """Returns: (training-candidate Dataset, separate test Dataset or None)."""
        cfg = self.config
        gen_rng, test_rng = Rng(cfg.seed).spawn(2)
        if cfg.source == "gaussian":
            kwargs = dict(means=cfg.means, covariances=cfg.covariances, separation=cfg.separation, spread=cfg.spread)
            train = gen_gaussian_classes(cfg.num_classes, cfg.dim, cfg.n_samples, gen_rng, **kwargs)
            test = None
            if cfg.test_samples:
                test = gen_gaussian_classes(cfg.num_classes, cfg.dim, cfg.test_samples, test_rng,
                                            id_offset=cfg.n_samples, **kwargs)
            return train, test
        if cfg.source == "two-moons":
            train = gen_two_moons(cfg.n_samples, cfg.noise, gen_rng)
            test = gen_two_moons(cfg.test_samples, cfg.noise, test_rng, cfg.n_samples) if cfg.test_samples else None
            return train, test
        if cfg.source == "csv":
            train = load_csv(cfg.path)
            test = _reindex(load_csv(cfg.test_path), len(train)) if cfg.test_path else None
            return _align_classes(train, test)
        train = load_idx(cfg.path, cfg.labels_path)
        test = load_idx(cfg.test_path, cfg.test_labels_path, id_offset=len(train)) if cfg.test_path else None
        return _align_classes(train, test)

    def build(self):
        """Load, split and cache the SemiSupervisedData."""
        if self._data is None:
            train, test = self.load_dataset()
            tagged = subsample_labels(train, self.config.split)
            self._data = SemiSupervisedData.from_tagged(tagged, test)
            logging.info(f"Dataset ready: source={self.config.source}, C={self._data.num_classes}, "
                         f"D={self._data.dim}, split={self._data.fingerprint()[:12]}")
        return self._data


def _reindex(ds, offset):
    return Dataset(ds.inputs, ds.labels, ds.ids + offset, ds.num_classes, ds.tags, ds.grid_shape)


def _align_classes(train, test):
    """Give train and a separately loaded test set the same class count."""
    if test is None or test.num_classes == train.num_classes:
        return train, test
    c = max(train.num_classes, test.num_classes)
    return (Dataset(train.inputs, train.labels, train.ids, c, train.tags, train.grid_shape),
            Dataset(test.inputs, test.labels, test.ids, c, test.tags, test.grid_shape))
