"""
Dense vector math, probability transforms, similarity measures and seeded
sampling shared by every other module.

All arrays are float64. Functions accept anything ``np.asarray`` understands.
"""
import logging

import numpy as np

from utils import DimensionError, NumericError, ParameterError, DomainError

LOG_CLAMP = 1e-12


class Rng:
    """Seeded random stream (PCG64). One owner at a time; never share across workers."""

    def __init__(self, seed, _seed_sequence=None):
        if int(seed) < 0 or int(seed) >= 2**64:
            raise ParameterError(f"Seed must be a 64-bit unsigned integer, got {seed}.")
        self.seed = int(seed)
        self._seed_sequence = _seed_sequence if _seed_sequence is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seed_sequence))

    def spawn(self, n):
        """Derive ``n`` independent child streams, deterministic in the parent seed."""
        return [Rng(self.seed, child) for child in self._seed_sequence.spawn(n)]

    # Thin passthroughs keep call sites short.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def gamma(self, shape, size=None):
        return self.generator.standard_gamma(shape, size)

    def __repr__(self):
        return f"Rng(seed={self.seed})"


def _as_vector(values, name="input"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DimensionError(f"{name} is empty.")
    return arr


def softmax(z):
    """
    Exp-normalize logits along the last axis.
    Works on a single vector or a (N, C) matrix of row logits.
    Raises: DimensionError on empty input, NumericError on non-finite input.
    """
    z = _as_vector(z, "logits")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits.")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def soft_cross_entropy(target, pred):
    """
    Cross-entropy -sum_c target_c * log(pred_c) with pred clamped to [1e-12, 1].
    Row-wise for (N, C) inputs.
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(f"Target shape {target.shape} does not match prediction shape {pred.shape}.")
    clamped = np.clip(pred, LOG_CLAMP, 1.0)
    return -np.sum(target * np.log(clamped), axis=-1)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionError(f"Label out of range for {num_classes} classes.")
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cosine_dissimilarity(a, b, diagnostics=None):
    """
    1 - cos(a, b), in [0, 2]. A zero-norm vector gives the neutral value 1
    and increments ``diagnostics['zero_norm']`` when a Counter is passed.
    """
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"Vectors of different length: {a.shape} vs {b.shape}.")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        if diagnostics is not None:
            diagnostics["zero_norm"] += 1
        logging.warning("Zero-norm vector in cosine dissimilarity; using neutral value 1.")
        return 1.0
    cos = float(np.dot(a, b) / (na * nb))
    return float(np.clip(1.0 - cos, 0.0, 2.0))


def dissimilarity_matrix(anchors, pool, diagnostics=None):
    """Pairwise cosine dissimilarity, shape (len(anchors), len(pool))."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if anchors.shape[1] != pool.shape[1]:
        raise DimensionError(f"Anchor dim {anchors.shape[1]} does not match pool dim {pool.shape[1]}.")
    na = np.linalg.norm(anchors, axis=1)
    npool = np.linalg.norm(pool, axis=1)
    zero = (na[:, None] == 0.0) | (npool[None, :] == 0.0)
    safe_a = np.where(na == 0.0, 1.0, na)
    safe_p = np.where(npool == 0.0, 1.0, npool)
    cos = (anchors @ pool.T) / (safe_a[:, None] * safe_p[None, :])
    dis = np.clip(1.0 - cos, 0.0, 2.0)
    if np.any(zero):
        dis[zero] = 1.0
        if diagnostics is not None:
            diagnostics["zero_norm"] += int(np.count_nonzero(zero))
    return dis


def sample_beta(alpha, rng, size=None):
    """
    Draw gamma ~ Beta(alpha, alpha) as X / (X + Y) with X, Y ~ Gamma(alpha).
    Redraws the rare underflow cases so the result is strictly inside (0, 1).
    """
    if not alpha > 0:
        raise ParameterError(f"Beta parameter alpha must be > 0, got {alpha}.")
    if size is None:
        while True:
            x = rng.gamma(alpha)
            y = rng.gamma(alpha)
            if x + y > 0.0:
                g = x / (x + y)
                if 0.0 < g < 1.0:
                    return float(g)
    out = np.empty(size, dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = sample_beta(alpha, rng)
    return out


def batch_median(values):
    """Standard median: middle element, or mean of the two middle elements."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DomainError("Median of an empty batch is undefined.")
    ordered = np.sort(arr)
    mid = ordered.size // 2
    if ordered.size % 2:
        return float(ordered[mid])
    return float((ordered[mid - 1] + ordered[mid]) / 2.0)

