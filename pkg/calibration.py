"""
Calibration and pseudo-label quality diagnostics: reliability bins, expected
calibration error, impurity and error rate. All percentages are 0-100.

Bins are equal-width on (0, 1]: a record with confidence c lands in bin
ceil(c·M) (1-based), confidence 0 in bin 1.
"""
import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from utils import DomainError, ParameterError, atomic_write_csv

DEFAULT_NUM_BINS = 15
RELIABILITY_HEADERS = ["bin_lower", "bin_upper", "count", "mean_confidence", "accuracy"]


@dataclass(frozen=True)
class PredictionRecord:
    confidence: float
    predicted: int
    true: int


@dataclass
class RecordSet:
    """Column-oriented records; what the metric functions work on internally."""
    confidences: np.ndarray
    predicted: np.ndarray
    true: np.ndarray

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        self.predicted = np.asarray(self.predicted, dtype=np.int64).reshape(-1)
        self.true = np.asarray(self.true, dtype=np.int64).reshape(-1)
        if not (len(self.confidences) == len(self.predicted) == len(self.true)):
            raise ParameterError("Record columns have different lengths.")
        if np.any((self.confidences < 0.0) | (self.confidences > 1.0)) or not np.all(np.isfinite(self.confidences)):
            raise ParameterError("Record confidences must lie in [0, 1].")

    def __len__(self):
        return len(self.confidences)

    @property
    def correct(self):
        return self.predicted == self.true

    @classmethod
    def from_probabilities(cls, probs, labels):
        """Max-probability confidence and argmax prediction (ties -> lowest class)."""
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        predicted = np.argmax(probs, axis=1)
        return cls(probs[np.arange(len(probs)), predicted], predicted, labels)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls([r.confidence for r in records], [r.predicted for r in records], [r.true for r in records])

    def subset(self, mask):
        return RecordSet(self.confidences[mask], self.predicted[mask], self.true[mask])


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float # 0 for empty bins
    accuracy: float # 0 for empty bins


@dataclass
class ImpurityResult:
    percent: float
    passing: int
    wrong: int

    @property
    def empty(self):
        """True when no record passed the threshold (percent is then defined as 0)."""
        return self.passing == 0


@dataclass
class CalibrationReport:
    ece: float
    mce: float
    error_rate: float
    bins: List[ReliabilityBin]
    num_bins: int
    count: int


def _as_record_set(records):
    if isinstance(records, RecordSet):
        return records
    return RecordSet.from_records(records)


def _require_records(records, num_bins):
    rs = _as_record_set(records)
    if len(rs) == 0:
        raise DomainError("Calibration metrics need at least one record.")
    if int(num_bins) < 1:
        raise ParameterError(f"Bin count must be >= 1, got {num_bins}.")
    return rs


def bin_indices(confidences, num_bins):
    """0-based bin index of each confidence under the ceil(c·M) rule."""
    idx = np.ceil(np.asarray(confidences, dtype=np.float64) * num_bins).astype(np.int64)
    return np.clip(idx, 1, num_bins) - 1


def reliability_bins(records, num_bins=DEFAULT_NUM_BINS):
    """
    Per-bin count, mean confidence and accuracy, one entry per bin (empties included).
    Raises: DomainError for empty records.
    """
    rs = _require_records(records, num_bins)
    m = int(num_bins)
    idx = bin_indices(rs.confidences, m)
    counts = np.bincount(idx, minlength=m)
    conf_sums = np.bincount(idx, weights=rs.confidences, minlength=m)
    acc_sums = np.bincount(idx, weights=rs.correct.astype(np.float64), minlength=m)
    bins = []
    for b in range(m):
        n = int(counts[b])
        bins.append(ReliabilityBin(lower=b / m, upper=(b + 1) / m, count=n,
                                   mean_confidence=conf_sums[b] / n if n else 0.0,
                                   accuracy=acc_sums[b] / n if n else 0.0))
    return bins


def ece(records, num_bins=DEFAULT_NUM_BINS):
    """Expected calibration error in percent: sum_b (n_b/N)·|acc_b - conf_b|·100."""
    rs = _require_records(records, num_bins)
    bins = reliability_bins(rs, num_bins)
    total = len(rs)
    return 100.0 * sum(b.count / total * abs(b.accuracy - b.mean_confidence) for b in bins if b.count)


def maximum_calibration_error(records, num_bins=DEFAULT_NUM_BINS):
    """Largest per-bin confidence/accuracy gap over non-empty bins, in percent."""
    bins = reliability_bins(records, num_bins)
    return 100.0 * max(abs(b.accuracy - b.mean_confidence) for b in bins if b.count)


def impurity(records, threshold):
    """
    Share of threshold-passing records (confidence >= threshold) whose
    pseudo-label (``predicted``) disagrees with the hidden label (``true``).
    No passing record gives 0 with ``result.empty`` set.
    """
    rs = _as_record_set(records)
    passing = rs.confidences >= threshold
    n_pass = int(np.count_nonzero(passing))
    if n_pass == 0:
        logging.warning(f"Impurity undefined: no record passes threshold {threshold}; reporting 0.")
        return ImpurityResult(percent=0.0, passing=0, wrong=0)
    wrong = int(np.count_nonzero(passing & ~rs.correct))
    return ImpurityResult(percent=100.0 * wrong / n_pass, passing=n_pass, wrong=wrong)


def error_rate(records):
    """Top-1 error in percent."""
    rs = _as_record_set(records)
    if len(rs) == 0:
        raise DomainError("Error rate of an empty record set is undefined.")
    return 100.0 * np.count_nonzero(~rs.correct) / len(rs)


def calibration_report(records, num_bins=DEFAULT_NUM_BINS):
    rs = _require_records(records, num_bins)
    return CalibrationReport(ece=ece(rs, num_bins), mce=maximum_calibration_error(rs, num_bins),
                             error_rate=error_rate(rs), bins=reliability_bins(rs, num_bins),
                             num_bins=int(num_bins), count=len(rs))


def write_reliability_csv(filepath, bins):
    """Reliability table, one row per bin including empty bins."""
    rows = [{"bin_lower": b.lower, "bin_upper": b.upper, "count": b.count,
             "mean_confidence": b.mean_confidence, "accuracy": b.accuracy} for b in bins]
    return atomic_write_csv(filepath, RELIABILITY_HEADERS, rows)
