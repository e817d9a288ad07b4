"""
Difficulty-aware mixup: median splits of labeled (AUM) and pseudo-labeled
(APM) batches, and pairing of each labeled sample with a randomly chosen
member of the top-k% most cosine-dissimilar candidates from the opposite
difficulty side of the pseudo-labeled pool.
"""
import math
import logging
from collections import Counter, namedtuple
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from numerics import batch_median, dissimilarity_matrix, sample_beta
from utils import DomainError, DimensionError, ParameterError

LABELED = "labeled"
UNLABELED = "unlabeled"
EASY = "easy"
HARD = "hard"

# Arm name -> (anchor source, anchor side, pool source, pool side)
TARGETED_ARMS = {
    "LE+UH": (LABELED, EASY, UNLABELED, HARD),
    "LH+UE": (LABELED, HARD, UNLABELED, EASY),
}
MIXUP_ALL_ARMS = {
    "LE+LH": (LABELED, EASY, LABELED, HARD),
    "UE+UH": (UNLABELED, EASY, UNLABELED, HARD),
}

ParentRef = namedtuple("ParentRef", ["source", "id", "difficulty"])


class MixupDiagnostics(Counter):
    """Instrumentation counters: mixed samples per arm, skipped arms, empty pools, zero-norm events."""

    def mixed_total(self):
        return sum(self[arm] for arm in (*TARGETED_ARMS, *MIXUP_ALL_ARMS))


class PairingConfig(BaseModel):
    """How mixup partners are chosen and how the mixing coefficient is drawn."""
    model_config = ConfigDict(extra="forbid")

    k: float = Field(5.0, ge=0.0, le=100.0) # percent of the candidate pool; 0 = uniform, no cosine ranking
    alpha: float = Field(0.4, gt=0.0)
    representation: Literal["raw-input", "penultimate-features"] = "raw-input"
    gamma_mode: Literal["beta", "fixed"] = "beta"
    fixed_gamma: float = Field(0.4, ge=0.0, le=1.0)
    mixup_all: bool = False # ablation: also mix LE+LH and UE+UH


@dataclass(frozen=True)
class SplitHalf:
    easy: np.ndarray # batch positions with margin >= threshold
    hard: np.ndarray
    threshold: float

    @classmethod
    def empty(cls):
        """Placeholder for a side with no candidates this step."""
        none = np.zeros(0, dtype=np.int64)
        return cls(easy=none, hard=none, threshold=float("nan"))


@dataclass(frozen=True)
class DifficultySplit:
    labeled: SplitHalf
    unlabeled: SplitHalf

    @property
    def tau_labeled(self):
        return self.labeled.threshold

    @property
    def tau_unlabeled(self):
        return self.unlabeled.threshold

    def side(self, source, difficulty):
        half = self.labeled if source == LABELED else self.unlabeled
        return half.easy if difficulty == EASY else half.hard


@dataclass
class SampleBatch:
    """One side of the mixup pool: inputs with their (soft) targets and ids."""
    ids: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    representations: Optional[np.ndarray] = None # vectors fed to cosine dissimilarity; defaults to inputs

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.representations is None:
            self.representations = self.inputs
        if not (len(self.ids) == len(self.inputs) == len(self.targets) == len(self.representations)):
            raise DimensionError("SampleBatch fields have different lengths.")

    def __len__(self):
        return len(self.ids)


@dataclass
class MixCandidate:
    x: np.ndarray
    y: np.ndarray
    ref: Optional[ParentRef] = None


@dataclass
class MixedSample:
    x: np.ndarray
    y: np.ndarray
    gamma: float
    parent_a: Optional[ParentRef] = None
    parent_b: Optional[ParentRef] = None
    arm: str = ""

    @property
    def labeled_id(self):
        return next((p.id for p in (self.parent_a, self.parent_b) if p and p.source == LABELED), None)

    @property
    def unlabeled_id(self):
        return next((p.id for p in (self.parent_a, self.parent_b) if p and p.source == UNLABELED), None)


def split_by_median(margins):
    """
    Split a batch at its median margin: margin >= tau is easy, the rest hard.
    Returns: SplitHalf with index arrays into ``margins``.
    Raises: DomainError for an empty batch.
    """
    margins = np.asarray(margins, dtype=np.float64).reshape(-1)
    if margins.size == 0:
        raise DomainError("Cannot split an empty batch by difficulty.")
    tau = batch_median(margins)
    easy = np.flatnonzero(margins >= tau)
    hard = np.flatnonzero(margins < tau)
    return SplitHalf(easy=easy, hard=hard, threshold=tau)


def _top_m(k_percent, pool_size):
    return max(1, math.ceil(k_percent * pool_size / 100.0 - 1e-9))


def _pick(dissimilarities, k_percent, rng):
    """Uniform pick among the top-m most dissimilar (ties -> lower index first)."""
    n = dissimilarities.size
    order = np.argsort(-dissimilarities, kind="stable")
    return int(order[rng.integers(_top_m(k_percent, n))])


def topk_dissimilar(anchor, pool, k_percent, rng, diagnostics=None):
    """
    Pick a pool index uniformly among the ceil(k%·|pool|) entries most
    cosine-dissimilar to ``anchor``. k_percent = 0 picks uniformly over the
    whole pool without ranking.
    Raises: DomainError for an empty pool, ParameterError for k outside [0, 100].
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.size == 0 or len(pool) == 0:
        raise DomainError("Cannot pick a mixup partner from an empty pool.")
    if not 0.0 <= k_percent <= 100.0:
        raise ParameterError(f"k must be a percentage in [0, 100], got {k_percent}.")
    if k_percent == 0:
        return int(rng.integers(len(pool)))
    dis = dissimilarity_matrix(anchor, pool, diagnostics)[0]
    return _pick(dis, k_percent, rng)


def mix_pair(a, b, gamma):
    """
    Convex combination x = g·a.x + (1-g)·b.x, y = g·a.y + (1-g)·b.y.
    ``a`` is the labeled parent whenever one is involved.
    """
    ax, bx = np.asarray(a.x, dtype=np.float64), np.asarray(b.x, dtype=np.float64)
    ay, by = np.asarray(a.y, dtype=np.float64), np.asarray(b.y, dtype=np.float64)
    if ax.shape != bx.shape or ay.shape != by.shape:
        raise DimensionError(f"Cannot mix inputs {ax.shape}/{bx.shape} with labels {ay.shape}/{by.shape}.")
    if not 0.0 <= gamma <= 1.0:
        raise ParameterError(f"Mixing coefficient must be in [0, 1], got {gamma}.")
    return MixedSample(x=gamma * ax + (1.0 - gamma) * bx,
                       y=gamma * ay + (1.0 - gamma) * by,
                       gamma=float(gamma), parent_a=a.ref, parent_b=b.ref)


def draw_gamma(cfg, rng):
    if cfg.gamma_mode == "fixed":
        return cfg.fixed_gamma
    return sample_beta(cfg.alpha, rng)


def build_mixup_batch(split, labeled, unlabeled, cfg, rng, diagnostics=None):
    """
    Pair labeled-easy with unlabeled-hard and labeled-hard with unlabeled-easy
    (plus LE+LH and UE+UH when ``cfg.mixup_all``), drawing a fresh gamma per pair.
    An arm whose partner pool is empty is skipped and counted; both unlabeled
    pools empty yields no targeted pairs and sets ``diagnostics['empty_pools']``.
    Returns: list of MixedSample, ordered by arm then anchor position.
    """
    diagnostics = diagnostics if diagnostics is not None else MixupDiagnostics()
    batches = {LABELED: labeled, UNLABELED: unlabeled}
    arms = dict(TARGETED_ARMS)
    if cfg.mixup_all:
        arms.update(MIXUP_ALL_ARMS)

    if len(split.unlabeled.easy) == 0 and len(split.unlabeled.hard) == 0:
        diagnostics["empty_pools"] += 1
        logging.warning("Both pseudo-labeled pools are empty; no targeted mixup this step.")

    mixed = []
    for arm, (a_src, a_side, p_src, p_side) in arms.items():
        anchors = split.side(a_src, a_side)
        pool = split.side(p_src, p_side)
        if len(anchors) == 0:
            continue
        if len(pool) == 0:
            diagnostics[f"skipped:{arm}"] += 1
            logging.warning(f"Mixup arm {arm} skipped: empty {p_src}-{p_side} pool.")
            continue
        a_batch, p_batch = batches[a_src], batches[p_src]
        dis = None
        if cfg.k > 0:
            dis = dissimilarity_matrix(a_batch.representations[anchors], p_batch.representations[pool], diagnostics)
        for row, anchor_pos in enumerate(anchors):
            choice = int(rng.integers(len(pool))) if dis is None else _pick(dis[row], cfg.k, rng)
            partner_pos = pool[choice]
            a = MixCandidate(a_batch.inputs[anchor_pos], a_batch.targets[anchor_pos],
                             ParentRef(a_src, int(a_batch.ids[anchor_pos]), a_side))
            b = MixCandidate(p_batch.inputs[partner_pos], p_batch.targets[partner_pos],
                             ParentRef(p_src, int(p_batch.ids[partner_pos]), p_side))
            sample = mix_pair(a, b, draw_gamma(cfg, rng))
            sample.arm = arm
            mixed.append(sample)
        diagnostics[arm] += len(anchors)
    return mixed
