import gzip
import struct

import numpy as np
import pytest
from pydantic import ValidationError

from data_manager import (
    TAG_LABELED, TAG_TEST, TAG_UNLABELED, DataManager, DatasetConfig, SemiSupervisedData, SplitSpec,
    gen_gaussian_classes, gen_two_moons, iterate_batches, load_csv, load_idx, subsample_labels,
)
from numerics import Rng
from utils import DomainError, FormatError, ParameterError, SampleLookupError

# --- Test Fixtures ---

@pytest.fixture
def rng():
    return Rng(5)


@pytest.fixture
def three_class(rng):
    return gen_gaussian_classes(3, 4, 90, rng, separation=4.0)


@pytest.fixture
def ssl_data(three_class):
    tagged = subsample_labels(three_class, SplitSpec(labels_per_class=4, test_fraction=0.2, seed=1))
    return SemiSupervisedData.from_tagged(tagged)


def _write_idx(path, magic, dims, payload, compress=False):
    raw = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)
    path.write_bytes(gzip.compress(raw) if compress else raw)
    return str(path)


# --- Generators ---

def test_gaussian_counts_and_balance(rng):
    ds = gen_gaussian_classes(3, 2, 10, rng)
    assert len(ds) == 10
    assert list(ds.class_counts()) == [4, 3, 3]
    assert len(set(ds.ids.tolist())) == 10


def test_gaussian_well_separated_classes_are_linearly_separable(rng):
    ds = gen_gaussian_classes(2, 2, 400, rng, means=[[-10.0, 0.0], [10.0, 0.0]], covariances=[1.0, 1.0])
    predicted = (ds.inputs[:, 0] > 0).astype(int)
    assert np.mean(predicted == ds.labels) >= 0.99


def test_gaussian_accepts_diagonal_and_full_covariances(rng):
    ds = gen_gaussian_classes(2, 2, 20, rng, covariances=[[1.0, 0.0], [[2.0, 0.5], [0.5, 1.0]]])
    assert ds.inputs.shape == (20, 2)


def test_gaussian_rejects_invalid_covariance(rng):
    with pytest.raises(ParameterError):
        gen_gaussian_classes(2, 2, 10, rng, covariances=[[[1.0, 2.0], [2.0, 1.0]], 1.0])
    with pytest.raises(ParameterError):
        gen_gaussian_classes(2, 2, 10, rng, covariances=[[-1.0, 1.0], 1.0])


def test_two_moons_noiseless_geometry(rng):
    ds = gen_two_moons(101, 0.0, rng)
    outer = ds.inputs[ds.labels == 0]
    inner = ds.inputs[ds.labels == 1]
    assert np.allclose(np.linalg.norm(outer, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(inner - [1.0, 0.5], axis=1), 1.0, atol=1e-9)
    assert abs(len(outer) - len(inner)) <= 1


def test_two_moons_rejects_negative_noise(rng):
    with pytest.raises(ParameterError):
        gen_two_moons(10, -0.1, rng)


def _nearest_centroid_accuracy(train, test):
    centroids = np.stack([train.inputs[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    distances = np.linalg.norm(test.inputs[:, None, :] - centroids[None, :, :], axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == test.labels))


def test_gaussian_identical_means_are_unlearnable(rng):
    means = np.zeros((3, 4))
    train = gen_gaussian_classes(3, 4, 3000, rng, means=means)
    test = gen_gaussian_classes(3, 4, 3000, rng, means=means)
    assert _nearest_centroid_accuracy(train, test) <= 1.0 / 3 + 0.05


def test_two_moons_defeat_nearest_centroid(rng):
    clean = gen_two_moons(2000, 0.0, rng)
    # the centroid bisector cuts off the tip of each moon: 0.668 rad of pi
    assert _nearest_centroid_accuracy(clean, clean) == pytest.approx(1.0 - 0.66811 / np.pi, abs=0.01)
    clean_test = gen_two_moons(501, 0.0, rng)
    nearest = np.argmin(np.linalg.norm(clean_test.inputs[:, None, :] - clean.inputs[None, :, :], axis=2), axis=1)
    reference = float(np.mean(clean.labels[nearest] == clean_test.labels))
    assert reference == 1.0
    noisy_train = gen_two_moons(2000, 0.3, rng)
    noisy_test = gen_two_moons(2000, 0.3, rng)
    noisy = _nearest_centroid_accuracy(noisy_train, noisy_test)
    assert 0.65 <= noisy <= 0.87
    assert noisy < reference


# --- Splitting ---

def test_subsample_labels_counts(three_class):
    tagged = subsample_labels(three_class, SplitSpec(labels_per_class=4, seed=3))
    labeled = tagged.labels[tagged.tags == TAG_LABELED]
    assert len(labeled) == 12
    assert list(np.bincount(labeled, minlength=3)) == [4, 4, 4]
    assert not np.any(tagged.tags == TAG_TEST)


def test_subsample_labels_partition_and_determinism(three_class):
    spec = SplitSpec(labels_per_class=2, test_fraction=0.3, seed=8)
    a = subsample_labels(three_class, spec)
    b = subsample_labels(three_class, spec)
    assert np.array_equal(a.tags, b.tags)
    counts = {tag: int(np.sum(a.tags == tag)) for tag in (TAG_LABELED, TAG_UNLABELED, TAG_TEST)}
    assert sum(counts.values()) == len(three_class)
    assert counts[TAG_TEST] == 27 and counts[TAG_LABELED] == 6


def test_subsample_all_labels_leaves_unlabeled_empty(rng):
    ds = gen_gaussian_classes(2, 2, 10, rng)
    tagged = subsample_labels(ds, SplitSpec(labels_per_class=5))
    assert not np.any(tagged.tags == TAG_UNLABELED)


def test_subsample_insufficient_class_names_it(rng):
    ds = gen_gaussian_classes(2, 2, 10, rng)
    with pytest.raises(DomainError, match="Class 0"):
        subsample_labels(ds, SplitSpec(labels_per_class=6))


def test_label_fraction(rng):
    ds = gen_gaussian_classes(2, 2, 100, rng)
    tagged = subsample_labels(ds, SplitSpec(label_fraction=0.1))
    assert int(np.sum(tagged.tags == TAG_LABELED)) == 10


def test_split_spec_validation():
    assert SplitSpec().labels_per_class == 4
    with pytest.raises(ValidationError):
        SplitSpec(labels_per_class=0)
    with pytest.raises(ValidationError):
        SplitSpec(labels_per_class=2, label_fraction=0.5)


def test_hidden_labels_only_in_vault(ssl_data, three_class):
    assert not hasattr(ssl_data.unlabeled, "labels")
    ids = ssl_data.unlabeled.ids[:5]
    expected = [int(three_class.labels[three_class.ids == i][0]) for i in ids]
    assert list(ssl_data.vault.labels_for(ids)) == expected
    with pytest.raises(SampleLookupError):
        ssl_data.vault.labels_for(ssl_data.labeled.ids[:1])


def test_fingerprint_tracks_split(three_class):
    spec = SplitSpec(labels_per_class=4, seed=1)
    first = SemiSupervisedData.from_tagged(subsample_labels(three_class, spec)).fingerprint()
    again = SemiSupervisedData.from_tagged(subsample_labels(three_class, spec)).fingerprint()
    other = SemiSupervisedData.from_tagged(subsample_labels(three_class, SplitSpec(labels_per_class=4, seed=2)))
    assert first == again
    assert first != other.fingerprint()


# --- Loaders ---

def test_load_csv_golden(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("x1,x2,label\n0.5,1.25,0\n-2,3e-1,1\n4,5,2\n")
    ds = load_csv(str(path))
    assert len(ds) == 3
    assert np.array_equal(ds.inputs, [[0.5, 1.25], [-2.0, 0.3], [4.0, 5.0]])
    assert list(ds.labels) == [0, 1, 2]
    assert ds.num_classes == 3


def test_load_csv_ragged_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2,label\n0.5,1.0,0\n1.0,1\n")
    with pytest.raises(FormatError, match="line 3"):
        load_csv(str(path))


def test_load_csv_rejects_locale_decimal(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text('x1,label\n"0,5",1\n')
    with pytest.raises(FormatError, match="line 2"):
        load_csv(str(path))


def test_load_csv_rejects_non_finite_values(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,x2,label\n0.5,1.0,1\nnan,inf,0\n")
    with pytest.raises(FormatError, match="line 3"):
        load_csv(str(path))


def test_load_idx_scales_pixels(tmp_path):
    images = _write_idx(tmp_path / "img.idx", 0x803, (1, 2, 2), [0, 255, 51, 102])
    labels = _write_idx(tmp_path / "lab.idx", 0x801, (1,), [7])
    ds = load_idx(images, labels)
    assert np.allclose(ds.inputs, [[0.0, 1.0, 0.2, 0.4]], atol=1e-15)
    assert list(ds.labels) == [7]
    assert ds.grid_shape == (2, 2)


def test_load_idx_gzip(tmp_path):
    images = _write_idx(tmp_path / "img.idx.gz", 0x803, (2, 1, 2), [0, 255, 255, 0], compress=True)
    labels = _write_idx(tmp_path / "lab.idx.gz", 0x801, (2,), [0, 1], compress=True)
    ds = load_idx(images, labels)
    assert ds.inputs.shape == (2, 2)


def test_load_idx_wrong_magic_at_offset_zero(tmp_path):
    images = _write_idx(tmp_path / "img.idx", 0x801, (1, 2, 2), [0, 0, 0, 0])
    labels = _write_idx(tmp_path / "lab.idx", 0x801, (1,), [0])
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(images, labels)


def test_load_idx_truncated_payload(tmp_path):
    images = _write_idx(tmp_path / "img.idx", 0x803, (2, 2, 2), [0, 0, 0, 0, 0])
    labels = _write_idx(tmp_path / "lab.idx", 0x801, (2,), [0, 1])
    with pytest.raises(FormatError, match="offset 21"):
        load_idx(images, labels)


def test_load_idx_count_mismatch(tmp_path):
    images = _write_idx(tmp_path / "img.idx", 0x803, (1, 1, 1), [0])
    labels = _write_idx(tmp_path / "lab.idx", 0x801, (2,), [0, 1])
    with pytest.raises(FormatError):
        load_idx(images, labels)


# --- Batching ---

def test_iterate_batches_unlabeled_epoch_is_permutation(ssl_data):
    n_u = len(ssl_data.unlabeled)
    stream = iterate_batches(ssl_data, 4, 7, Rng(1))
    seen = []
    while len(seen) < n_u:
        labeled, unlabeled = next(stream)
        assert len(labeled) == 4
        seen.extend(unlabeled.ids.tolist())
    assert sorted(seen) == sorted(ssl_data.unlabeled.ids.tolist())


def test_iterate_batches_deterministic(ssl_data):
    a = iterate_batches(ssl_data, 4, 8, Rng(3))
    b = iterate_batches(ssl_data, 4, 8, Rng(3))
    for _ in range(10):
        (la, ua), (lb, ub) = next(a), next(b)
        assert np.array_equal(la.ids, lb.ids) and np.array_equal(ua.ids, ub.ids)


def test_iterate_batches_empty_split(rng):
    ds = gen_gaussian_classes(2, 2, 10, rng)
    data = SemiSupervisedData.from_tagged(subsample_labels(ds, SplitSpec(labels_per_class=5)))
    with pytest.raises(DomainError):
        next(iterate_batches(data, 2, 2, rng))
    labeled, unlabeled = next(iterate_batches(data, 2, 2, rng, require_unlabeled=False))
    assert len(unlabeled) == 0


# --- DataManager ---

def test_data_manager_separate_test_draw():
    cfg = DatasetConfig(source="gaussian", num_classes=3, dim=8, n_samples=60, test_samples=30)
    data = DataManager(cfg).build()
    assert len(data.test) == 30
    assert len(data.labeled) == 12 and len(data.unlabeled) == 48
    assert not set(data.test.ids.tolist()) & set(data.labeled.ids.tolist())


def test_dataset_config_requires_existing_files(tmp_path):
    with pytest.raises(ValidationError):
        DatasetConfig(source="csv", path=str(tmp_path / "missing.csv"))
    with pytest.raises(ValidationError):
        DatasetConfig(source="idx", path=None)
