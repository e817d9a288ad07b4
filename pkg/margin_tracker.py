"""
Per-sample training dynamics: pseudo-margins, their smoothed history (APM)
for unlabeled samples and the area under the margin (AUM) for labeled ones.

One ``MarginTracker`` serves either role. It keeps, for every registered
sample id, an accumulated value per class plus the iteration at which each
class was last updated. Two accumulation forms exist:

  ema:   v_c <- PM * d/(1+t) + v_c * (1 - d/(1+t))   (d = smoothing delta)
  mean:  v_c <- ((n-1) * v_c + PM) / n               (n = updates of class c)

Between updates an accumulator is held constant; an update always uses the
global iteration t at which it happens.
"""
import logging

import numpy as np

from utils import DomainError, DimensionError, SampleLookupError, UsageError, FormatError, ParameterError

SNAPSHOT_VERSION = 1
FORMS = ("ema", "mean")
_SNAPSHOT_KEYS = ("version", "num_classes", "delta", "form", "iteration",
                  "ids", "values", "counts", "class_last", "sample_last")


def pseudo_margin(z, c):
    """z_c minus the largest other logit. Positive iff c is the strict argmax."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise DomainError(f"Pseudo-margin needs at least two classes, got {z.size}.")
    if not 0 <= int(c) < z.size:
        raise IndexError(f"Class index {c} out of range for {z.size} classes.")
    others = np.delete(z, int(c))
    return float(z[int(c)] - others.max())


def pseudo_margins(logits, classes):
    """Row-wise pseudo-margins for a (N, C) logit matrix and N class indices."""
    logits = np.asarray(logits, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DomainError("Pseudo-margins need a (N, C) logit matrix with C >= 2.")
    if classes.shape != (logits.shape[0],):
        raise DimensionError(f"Expected {logits.shape[0]} class indices, got shape {classes.shape}.")
    rows = np.arange(logits.shape[0])
    own = logits[rows, classes]
    masked = logits.copy()
    masked[rows, classes] = -np.inf
    return own - masked.max(axis=1)


def all_class_margins(logits):
    """Pseudo-margin of every class: (N, C) matrix with entry [i, c] = PM_c(z_i)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DomainError("Pseudo-margins need a (N, C) logit matrix with C >= 2.")
    order = np.argsort(-logits, axis=1, kind="stable")
    top1 = np.take_along_axis(logits, order[:, :1], axis=1)
    top2 = np.take_along_axis(logits, order[:, 1:2], axis=1)
    best_other = np.where(np.arange(logits.shape[1])[None, :] == order[:, :1], top2, top1)
    return logits - best_other


class MarginTracker:
    """Accumulated per-class margins for a set of sample ids."""

    def __init__(self, num_classes, delta=0.997, form="ema", name="margins"):
        if num_classes < 2:
            raise DomainError(f"Margin tracking needs at least two classes, got {num_classes}.")
        if not 0.0 < delta <= 1.0:
            raise ParameterError(f"Smoothing delta must be in (0, 1], got {delta}.")
        if form not in FORMS:
            raise ParameterError(f"Unknown tracker form '{form}'. Expected one of {FORMS}.")
        self.num_classes = int(num_classes)
        self.delta = float(delta)
        self.form = form
        self.name = name
        self.iteration = 0
        self._index = {}
        self._ids = np.zeros(0, dtype=np.int64)
        self._values = np.zeros((0, self.num_classes))
        self._counts = np.zeros((0, self.num_classes), dtype=np.int64)
        self._class_last = np.zeros((0, self.num_classes), dtype=np.int64)
        self._sample_last = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self._index)

    def __contains__(self, sample_id):
        return int(sample_id) in self._index

    def register(self, ids):
        """Add sample ids (already-registered ids are ignored). Accumulators start at 0."""
        new = [int(i) for i in np.atleast_1d(ids) if int(i) not in self._index]
        new = list(dict.fromkeys(new))
        if not new:
            return
        start = len(self._ids)
        for offset, sample_id in enumerate(new):
            self._index[sample_id] = start + offset
        k = len(new)
        self._ids = np.concatenate([self._ids, np.asarray(new, dtype=np.int64)])
        self._values = np.vstack([self._values, np.zeros((k, self.num_classes))])
        self._counts = np.vstack([self._counts, np.zeros((k, self.num_classes), dtype=np.int64)])
        self._class_last = np.vstack([self._class_last, np.full((k, self.num_classes), -1, dtype=np.int64)])
        self._sample_last = np.concatenate([self._sample_last, np.full(k, -1, dtype=np.int64)])
        logging.debug(f"Tracker '{self.name}' registered {k} samples ({len(self)} total).")

    def _rows(self, ids):
        try:
            return np.fromiter((self._index[int(i)] for i in np.atleast_1d(ids)), dtype=np.int64)
        except KeyError as e:
            raise SampleLookupError(f"Sample id {e.args[0]} is not registered with tracker '{self.name}'.") from None

    def _apply(self, rows, classes, margins, t):
        """Fold margins into accumulators (rows, classes) at iteration t. Rows must be unique."""
        if np.any(self._sample_last[rows] >= t):
            raise UsageError(f"Iteration {t} is not after the last update of every sample in tracker '{self.name}'.")
        current = self._values[rows, classes]
        counts = self._counts[rows, classes] + 1
        if self.form == "ema":
            weight = self.delta / (1.0 + t)
            updated = margins * weight + current * (1.0 - weight)
        else:
            updated = ((counts - 1) * current + margins) / counts
        self._values[rows, classes] = updated
        self._counts[rows, classes] = counts
        self._class_last[rows, classes] = t
        self.iteration = max(self.iteration, int(t))

    def apm_update(self, sample_id, z, c, t):
        """Fold PM_c(z) into the class-c accumulator of ``sample_id`` at iteration t."""
        row = self._rows([sample_id])
        self._check_classes(np.asarray(z).size)
        pm = pseudo_margin(z, c)
        self._apply(row, np.array([int(c)]), np.array([pm]), int(t))
        self._sample_last[row] = int(t)

    def aum_update(self, sample_id, z, y, t):
        """Fold the ground-truth margin of class y into ``sample_id`` at iteration t."""
        self.apm_update(sample_id, z, y, t)

    def apm_value(self, sample_id, c):
        """Current accumulated value for class c (0 if that class was never updated)."""
        row = self._rows([sample_id])[0]
        return float(self._values[row, int(c)])

    aum_value = apm_value

    def update_batch(self, ids, logits, classes, t, all_classes=False):
        """
        Vectorised update for a batch. Duplicate ids are folded in once (first
        occurrence). With ``all_classes`` every class accumulator advances with
        its own pseudo-margin; otherwise only the given class does.
        Returns: the unique ids that were updated.
        """
        ids = np.asarray(ids, dtype=np.int64)
        logits = np.asarray(logits, dtype=np.float64)
        classes = np.asarray(classes, dtype=np.int64)
        if len(ids) == 0:
            return ids
        self._check_classes(logits.shape[1])
        _, first = np.unique(ids, return_index=True)
        first = np.sort(first)
        rows = self._rows(ids[first])
        t = int(t)
        if all_classes:
            margins = all_class_margins(logits[first])
            n, c = margins.shape
            self._apply(np.repeat(rows, c), np.tile(np.arange(c), n), margins.reshape(-1), t)
        else:
            margins = pseudo_margins(logits[first], classes[first])
            self._apply(rows, classes[first], margins, t)
        self._sample_last[rows] = t
        return ids[first]

    def values_for(self, ids, classes):
        """Accumulated values for (id, class) pairs, as an array."""
        rows = self._rows(ids)
        return self._values[rows, np.asarray(classes, dtype=np.int64)]

    def history(self, sample_id):
        """Full per-class accumulator vector of one sample (a copy)."""
        return self._values[self._rows([sample_id])[0]].copy()

    def _check_classes(self, c):
        if c != self.num_classes:
            raise DimensionError(f"Tracker '{self.name}' holds {self.num_classes} classes, got logits for {c}.")

    # --- Persistence ---
    def snapshot(self):
        """Serializable table of the full state (numpy arrays and scalars)."""
        return {
            "version": np.array(SNAPSHOT_VERSION, dtype=np.int64),
            "num_classes": np.array(self.num_classes, dtype=np.int64),
            "delta": np.array(self.delta, dtype=np.float64),
            "form": np.array(self.form),
            "iteration": np.array(self.iteration, dtype=np.int64),
            "ids": self._ids.copy(),
            "values": self._values.copy(),
            "counts": self._counts.copy(),
            "class_last": self._class_last.copy(),
            "sample_last": self._sample_last.copy(),
        }

    @classmethod
    def restore(cls, table, name="margins"):
        """
        Rebuild a tracker from a snapshot table.
        Raises: FormatError on missing keys, a version mismatch or inconsistent shapes.
        """
        missing = [key for key in _SNAPSHOT_KEYS if key not in table]
        if missing:
            raise FormatError(f"Margin snapshot is missing keys: {missing}.")
        version = int(np.asarray(table["version"]))
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"Margin snapshot version {version} is not supported (expected {SNAPSHOT_VERSION}).")
        try:
            tracker = cls(int(np.asarray(table["num_classes"])), float(np.asarray(table["delta"])),
                          str(np.asarray(table["form"])), name=name)
        except (DomainError, ParameterError) as e:
            raise FormatError(f"Margin snapshot has invalid settings: {e}") from e
        ids = np.asarray(table["ids"], dtype=np.int64).reshape(-1)
        n, c = len(ids), tracker.num_classes
        shapes = {"values": (n, c), "counts": (n, c), "class_last": (n, c), "sample_last": (n,)}
        for key, shape in shapes.items():
            if np.asarray(table[key]).size != int(np.prod(shape)):
                raise FormatError(f"Margin snapshot field '{key}' has the wrong shape.")
        if len(set(ids.tolist())) != n:
            raise FormatError("Margin snapshot contains duplicate sample ids.")
        tracker._ids = ids.copy()
        tracker._index = {int(i): row for row, i in enumerate(ids)}
        tracker._values = np.asarray(table["values"], dtype=np.float64).reshape(n, c).copy()
        tracker._counts = np.asarray(table["counts"], dtype=np.int64).reshape(n, c).copy()
        tracker._class_last = np.asarray(table["class_last"], dtype=np.int64).reshape(n, c).copy()
        tracker._sample_last = np.asarray(table["sample_last"], dtype=np.int64).reshape(n).copy()
        tracker.iteration = int(np.asarray(table["iteration"]))
        return tracker
