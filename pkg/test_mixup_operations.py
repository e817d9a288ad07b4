import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from mixup_operations import (
    EASY, HARD, LABELED, UNLABELED, DifficultySplit, MixCandidate, MixupDiagnostics, PairingConfig,
    SampleBatch, SplitHalf, build_mixup_batch, mix_pair, split_by_median, topk_dissimilar,
)
from numerics import Rng, dissimilarity_matrix, one_hot
from utils import DomainError, ParameterError

# --- Test Fixtures ---

@pytest.fixture
def rng():
    return Rng(2024)


def _batch(rng, n, dim=4, classes=3, offset=0):
    return SampleBatch(np.arange(offset, offset + n), rng.normal(size=(n, dim)),
                       one_hot(rng.integers(0, classes, size=n), classes))


# --- Median split ---

def test_split_by_median_partition_with_ties(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        margins = np.round(rng.normal(size=n), 1)
        half = split_by_median(margins)
        assert sorted(np.concatenate([half.easy, half.hard]).tolist()) == list(range(n))
        assert np.all(margins[half.easy] >= half.threshold)
        if len(half.hard):
            assert half.threshold > margins[half.hard].max()
        assert len(half.easy) >= 1


def test_split_single_and_identical_values():
    half = split_by_median([0.5])
    assert list(half.easy) == [0] and len(half.hard) == 0
    half = split_by_median([2.0, 2.0, 2.0, 2.0])
    assert len(half.easy) == 4 and half.threshold == 2.0


def test_split_empty_batch():
    with pytest.raises(DomainError):
        split_by_median([])


# --- Top-k selection ---

def test_topk_choice_inside_exhaustive_top_set(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pool = rng.normal(size=(n, 3))
        anchor = rng.normal(size=3)
        k = float([1, 5, 10, 15, 50, 100][int(rng.integers(6))])
        choice = topk_dissimilar(anchor, pool, k, rng)
        dis = dissimilarity_matrix(anchor, pool)[0]
        m = max(1, math.ceil(k * n / 100))
        cutoff = np.sort(dis)[::-1][m - 1]
        assert dis[choice] >= cutoff


def test_topk_full_pool_is_uniform(rng):
    pool = rng.normal(size=(8, 3))
    anchor = rng.normal(size=3)
    counts = np.bincount([topk_dissimilar(anchor, pool, 100, rng) for _ in range(8000)], minlength=8)
    assert stats.chisquare(counts).pvalue > 0.01


def test_topk_smallest_k_picks_most_dissimilar(rng):
    pool = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert topk_dissimilar(np.array([1.0, 0.0]), pool, 1, rng) == 2


def test_topk_five_percent_of_forty_splits_between_two_partners(rng):
    angles = np.linspace(-1.0, 1.0, 38)
    near = np.column_stack([np.cos(angles), np.sin(angles)])
    far = np.array([[-1.0, 0.2], [-1.0, -0.3]])
    pool = np.vstack([near[:20], far, near[20:]])
    picks = np.array([topk_dissimilar(np.array([1.0, 0.0]), pool, 5, rng) for _ in range(4000)])
    assert set(np.unique(picks)) == {20, 21}
    assert np.mean(picks == 20) == pytest.approx(0.5, abs=0.04)


def test_topk_k_zero_is_uniform_over_pool(rng):
    pool = rng.normal(size=(5, 2))
    seen = {topk_dissimilar(rng.normal(size=2), pool, 0, rng) for _ in range(200)}
    assert seen == set(range(5))


def test_topk_errors(rng):
    with pytest.raises(DomainError):
        topk_dissimilar(np.ones(2), np.zeros((0, 2)), 5, rng)
    with pytest.raises(ParameterError):
        topk_dissimilar(np.ones(2), np.ones((3, 2)), 101, rng)


# --- Mixing ---

def test_mix_pair_invariants(rng):
    for _ in range(10000):
        a = MixCandidate(rng.normal(size=3), rng.uniform(size=4))
        b = MixCandidate(rng.normal(size=3), rng.uniform(size=4))
        a.y /= a.y.sum()
        b.y /= b.y.sum()
        gamma = float(rng.uniform())
        mixed = mix_pair(a, b, gamma)
        assert mixed.y.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(mixed.y >= 0)
        lo, hi = np.minimum(a.x, b.x), np.maximum(a.x, b.x)
        assert np.all(mixed.x >= lo - 1e-12) and np.all(mixed.x <= hi + 1e-12)


def test_mix_pair_endpoints():
    a = MixCandidate(np.array([1.0, 2.0]), np.array([1.0, 0.0]))
    b = MixCandidate(np.array([3.0, 4.0]), np.array([0.0, 1.0]))
    assert np.array_equal(mix_pair(a, b, 1.0).x, a.x)
    assert np.array_equal(mix_pair(a, b, 0.0).y, b.y)
    assert np.allclose(mix_pair(a, b, 0.25).x, [2.5, 3.5])


def test_mix_pair_rejects_bad_gamma():
    a = MixCandidate(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ParameterError):
        mix_pair(a, a, 1.5)


def test_pairing_config_validation():
    assert PairingConfig().k == 5.0
    with pytest.raises(ValidationError):
        PairingConfig(k=-1)
    with pytest.raises(ValidationError):
        PairingConfig(unknown=1)


# --- Batch construction ---

def test_build_mixup_batch_provenance(rng):
    for _ in range(50):
        labeled = _batch(rng, 8)
        unlabeled = _batch(rng, 20, offset=100)
        split = DifficultySplit(split_by_median(rng.normal(size=8)), split_by_median(rng.normal(size=20)))
        diag = MixupDiagnostics()
        mixed = build_mixup_batch(split, labeled, unlabeled, PairingConfig(), rng, diag)
        assert len(mixed) == 8
        for sample in mixed:
            sources = {sample.parent_a.source, sample.parent_b.source}
            assert sources == {LABELED, UNLABELED}
            assert sample.parent_a.source == LABELED
            assert sample.parent_a.difficulty != sample.parent_b.difficulty
            assert sample.labeled_id < 100 <= sample.unlabeled_id
        assert diag["LE+UH"] + diag["LH+UE"] == 8
        assert diag["LE+LH"] == 0 and diag["UE+UH"] == 0


def test_build_mixup_batch_mixup_all_adds_same_source_arms(rng):
    labeled = _batch(rng, 6)
    unlabeled = _batch(rng, 10, offset=50)
    split = DifficultySplit(split_by_median(np.arange(6.0)), split_by_median(np.arange(10.0)))
    diag = MixupDiagnostics()
    mixed = build_mixup_batch(split, labeled, unlabeled, PairingConfig(mixup_all=True), rng, diag)
    assert diag["LE+LH"] == 3 and diag["UE+UH"] == 5
    assert {m.arm for m in mixed} == {"LE+UH", "LH+UE", "LE+LH", "UE+UH"}
    assert diag.mixed_total() == len(mixed)


def test_build_mixup_batch_empty_unlabeled_pools(rng, caplog):
    labeled = _batch(rng, 4)
    unlabeled = SampleBatch(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
    split = DifficultySplit(split_by_median(np.arange(4.0)), SplitHalf.empty())
    diag = MixupDiagnostics()
    assert build_mixup_batch(split, labeled, unlabeled, PairingConfig(), rng, diag) == []
    assert diag["empty_pools"] == 1
    assert diag["skipped:LE+UH"] == 1 and diag["skipped:LH+UE"] == 1
    warnings = [r.message for r in caplog.records if r.levelname == "WARNING"]
    assert len(warnings) == 3 and "skipped" in warnings[-1]


def test_build_mixup_batch_fixed_gamma(rng):
    labeled = _batch(rng, 4)
    unlabeled = _batch(rng, 6, offset=10)
    split = DifficultySplit(split_by_median(np.arange(4.0)), split_by_median(np.arange(6.0)))
    mixed = build_mixup_batch(split, labeled, unlabeled, PairingConfig(gamma_mode="fixed", fixed_gamma=0.4), rng)
    assert all(m.gamma == 0.4 for m in mixed)


def test_build_mixup_batch_is_deterministic():
    def run():
        rng = Rng(5)
        labeled = _batch(rng, 6)
        unlabeled = _batch(rng, 12, offset=20)
        split = DifficultySplit(split_by_median(rng.normal(size=6)), split_by_median(rng.normal(size=12)))
        return build_mixup_batch(split, labeled, unlabeled, PairingConfig(), rng)
    first, second = run(), run()
    assert [(m.labeled_id, m.unlabeled_id, m.gamma) for m in first] == \
           [(m.labeled_id, m.unlabeled_id, m.gamma) for m in second]


def test_split_sides():
    split = DifficultySplit(SplitHalf(np.array([0]), np.array([1]), 0.0), SplitHalf(np.array([2]), np.array([3]), 1.0))
    assert split.side(LABELED, HARD)[0] == 1
    assert split.side(UNLABELED, EASY)[0] == 2
    assert split.tau_unlabeled == 1.0
