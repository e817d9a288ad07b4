"""
Semi-supervised training: weak/strong augmentation, pseudo-labeling with a
confidence threshold, margin tracking, difficulty-aware or random mixup, and
the combined objective

    total = L_L + lambda_U * L_U + L_mixup

optimised with one SGD-momentum step per training step.
"""
import os
import json
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from calibration import DEFAULT_NUM_BINS, RecordSet, calibration_report, impurity
from data_manager import iterate_batches
from margin_tracker import MarginTracker
from mixup_operations import (
    LABELED, UNLABELED, MixCandidate, MixupDiagnostics, PairingConfig, ParentRef, SampleBatch,
    DifficultySplit, SplitHalf, build_mixup_batch, draw_gamma, mix_pair, split_by_median,
)
from model import (
    Gradients, backward, cosine_lr, forward, init_optimizer, init_params, load_checkpoint,
    penultimate_features, save_checkpoint, sgd_momentum_step,
)
from numerics import Rng, one_hot, sample_beta, soft_cross_entropy, softmax
from utils import DomainError, NumericError, ParameterError, TrainingAbortedError, atomic_write_text

METRIC_HEADERS = ["step", "lr", "L_L", "L_U", "L_mixup", "total", "mask_rate", "impurity", "test_error", "test_ece"]


class AugmentationSpec(BaseModel):
    """
    Weak and strong views. Jitter scales are multiples of the per-feature std
    of the training inputs. Grid-shaped inputs use flip+shift for the weak view
    and jitter plus a random erased patch for the strong view.
    """
    model_config = ConfigDict(extra="forbid")

    weak_jitter: float = Field(0.05, ge=0.0)
    strong_jitter: float = Field(0.2, ge=0.0)
    strong_dropout: float = Field(0.2, ge=0.0, lt=1.0)
    flip: bool = True
    max_shift: int = Field(2, ge=0)
    erase_fraction: float = Field(0.25, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _strong_exceeds_weak(self):
        if not self.strong_jitter > self.weak_jitter:
            raise ValueError(f"strong_jitter ({self.strong_jitter}) must exceed weak_jitter ({self.weak_jitter}).")
        return self


class TrainerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: Optional[int] = Field(None, ge=2) # filled from the dataset when omitted
    threshold: float = Field(0.95, gt=0.0, le=1.0)
    lambda_u: float = Field(1.0, ge=0.0)
    labeled_batch_size: int = Field(64, ge=1)
    unlabeled_batch_size: Optional[int] = Field(None, ge=1) # default 7 x labeled
    mixup_batch_size: Optional[int] = Field(None, ge=1) # random-mixup pairs per step; default labeled batch size
    total_steps: int = Field(1000, ge=0)
    warmup_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    warmup_steps: Optional[int] = Field(None, ge=0)
    use_warmup: bool = True
    warmup_gates_unsupervised: bool = False
    mixup_mode: Literal["calibratemix", "random-mixup", "none"] = "calibratemix"
    label_smoothing: bool = False
    smoothing_factor: float = Field(0.1, ge=0.0, lt=1.0)
    pairing: PairingConfig = Field(default_factory=PairingConfig)
    lr: float = Field(0.03, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    schedule: Literal["cosine", "fixmatch", "constant"] = "cosine"
    delta: float = Field(0.997, gt=0.0, le=1.0)
    aum_form: Literal["mean", "ema"] = "mean"
    apm_all_classes: bool = True
    restrict_pools_to_confident: bool = True
    track_masked_margins: bool = True # APM for every unlabeled sample seen, confident or not

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.total_steps > 0 and self.resolved_warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.resolved_warmup_steps}) must be below total_steps ({self.total_steps}).")
        return self

    # Derived defaults stay unset in the stored fields so arm overrides merge cleanly.
    @property
    def resolved_unlabeled_batch_size(self):
        return self.unlabeled_batch_size or 7 * self.labeled_batch_size

    @property
    def resolved_mixup_batch_size(self):
        return self.mixup_batch_size or self.labeled_batch_size

    @property
    def resolved_warmup_steps(self):
        if not self.use_warmup:
            return 0
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(self.warmup_fraction * self.total_steps))

    def resolved(self):
        """Field dump with every derived default filled in."""
        data = self.model_dump()
        data.update(unlabeled_batch_size=self.resolved_unlabeled_batch_size,
                    mixup_batch_size=self.resolved_mixup_batch_size,
                    warmup_steps=self.resolved_warmup_steps)
        return data

    @property
    def smoothing(self):
        return self.smoothing_factor if self.label_smoothing else 0.0


@dataclass
class LossBreakdown:
    step: int
    lr: float
    L_L: float
    L_U: float
    L_mixup: float
    total: float
    mask_rate: float
    impurity: float
    mixed: int = 0

    def as_row(self):
        return {"step": self.step, "lr": self.lr, "L_L": self.L_L, "L_U": self.L_U, "L_mixup": self.L_mixup,
                "total": self.total, "mask_rate": self.mask_rate, "impurity": self.impurity}


@dataclass
class LossTerm:
    """A scalar loss with its logit gradient and the forward cache it came from."""
    value: float
    d_logits: Optional[np.ndarray] = None
    cache: object = None
    logits: Optional[np.ndarray] = None

    @classmethod
    def zero(cls):
        return cls(0.0)

    def gradients(self, params):
        if self.cache is None:
            return Gradients.zeros_like(params)
        return backward(params, self.cache, self.d_logits)


@dataclass
class UnsupervisedResult:
    term: LossTerm
    mask: np.ndarray
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    weak_logits: np.ndarray
    weak_cache: object

    @property
    def mask_rate(self):
        return float(np.mean(self.mask)) if len(self.mask) else 0.0


class Augmenter:
    """Binds an AugmentationSpec to the training feature scale and optional image grid."""

    def __init__(self, spec, feature_std, grid_shape=None):
        self.spec = spec
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.grid_shape = tuple(grid_shape) if grid_shape else None

    def weak(self, x, rng):
        x, single = _as_batch(x)
        if self.grid_shape:
            out = self._flip_shift(x, rng)
        else:
            out = x + rng.normal(size=x.shape) * (self.spec.weak_jitter * self.feature_std)
        return out[0] if single else out

    def strong(self, x, rng):
        x, single = _as_batch(x)
        out = x + rng.normal(size=x.shape) * (self.spec.strong_jitter * self.feature_std)
        if self.grid_shape:
            out = self._erase(out, rng)
        elif self.spec.strong_dropout > 0:
            out = out * (rng.uniform(size=x.shape) >= self.spec.strong_dropout)
        return out[0] if single else out

    def _flip_shift(self, x, rng):
        rows, cols = self.grid_shape
        imgs = x.reshape(len(x), rows, cols).copy()
        if self.spec.flip:
            flip = rng.uniform(size=len(imgs)) < 0.5
            imgs[flip] = imgs[flip][:, :, ::-1]
        s = self.spec.max_shift
        if s > 0:
            padded = np.pad(imgs, ((0, 0), (s, s), (s, s)))
            offsets = rng.integers(0, 2 * s + 1, size=(len(imgs), 2))
            for i, (dy, dx) in enumerate(offsets):
                imgs[i] = padded[i, dy:dy + rows, dx:dx + cols]
        return imgs.reshape(len(x), rows * cols)

    def _erase(self, x, rng):
        rows, cols = self.grid_shape
        h = int(round(self.spec.erase_fraction * rows))
        w = int(round(self.spec.erase_fraction * cols))
        if h == 0 or w == 0:
            return x
        imgs = x.reshape(len(x), rows, cols).copy()
        tops = rng.integers(0, rows - h + 1, size=len(imgs))
        lefts = rng.integers(0, cols - w + 1, size=len(imgs))
        for i in range(len(imgs)):
            imgs[i, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w] = 0.0
        return imgs.reshape(len(x), rows * cols)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# --- Losses ---
def label_smooth(y, factor):
    """(1 - factor) * y + factor / C per class."""
    if not 0.0 <= factor < 1.0:
        raise ParameterError(f"Label-smoothing factor must be in [0, 1), got {factor}.")
    y = np.asarray(y, dtype=np.float64)
    return (1.0 - factor) * y + factor / y.shape[-1]


def _targets(labels, num_classes, smoothing):
    targets = one_hot(labels, num_classes)
    return label_smooth(targets, smoothing) if smoothing else targets


def soft_ce_term(logits, cache, targets, weights=None, normalizer=None):
    """
    Weighted soft cross-entropy summed over rows and divided by ``normalizer``
    (default: row count). dL/dlogits = w * (softmax - target) / normalizer.
    """
    probs = softmax(logits)
    per_sample = soft_cross_entropy(targets, probs)
    n = len(per_sample) if normalizer is None else normalizer
    w = np.ones(len(per_sample)) if weights is None else np.asarray(weights, dtype=np.float64)
    value = float(np.sum(w * per_sample) / n)
    return LossTerm(value, (probs - targets) * (w / n)[:, None], cache, logits)


def cross_entropy_term(params, inputs, targets, weights=None, normalizer=None):
    """Forward ``inputs`` and score them against soft ``targets``."""
    logits, cache = forward(params, np.atleast_2d(inputs))
    return soft_ce_term(logits, cache, np.atleast_2d(targets), weights, normalizer)


def pseudo_label(params, x, augmenter, rng):
    """Weak-view argmax class (lowest index on ties) and its softmax probability."""
    logits, _ = forward(params, augmenter.weak(x, rng))
    probs = softmax(logits)
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def pseudo_label_batch(params, inputs, augmenter, rng):
    """Returns: (classes, confidences, weak logits, weak cache)."""
    logits, cache = forward(params, augmenter.weak(inputs, rng))
    probs = softmax(logits)
    classes = np.argmax(probs, axis=1)
    return classes, probs[np.arange(len(probs)), classes], logits, cache


def supervised_loss(params, batch, augmenter, rng, smoothing=0.0):
    """Mean cross-entropy of weak-view predictions against (optionally smoothed) one-hot labels."""
    if len(batch) == 0:
        raise DomainError("Supervised loss needs a non-empty labeled batch.")
    targets = _targets(batch.labels, params.dims[-1], smoothing)
    return cross_entropy_term(params, augmenter.weak(batch.inputs, rng), targets)


def unsupervised_loss(params, batch, threshold, augmenter, rng, smoothing=0.0):
    """
    Confidence-masked consistency loss: samples whose weak-view confidence is at
    least ``threshold`` contribute the cross-entropy of their strong-view
    prediction against the weak-view pseudo-label. Normalised by the full batch size.
    """
    if len(batch) == 0:
        raise DomainError("Unsupervised loss needs a non-empty unlabeled batch.")
    classes, conf, weak_logits, weak_cache = pseudo_label_batch(params, batch.inputs, augmenter, rng)
    mask = conf >= threshold
    targets = _targets(classes, params.dims[-1], smoothing)
    term = cross_entropy_term(params, augmenter.strong(batch.inputs, rng), targets,
                              weights=mask.astype(np.float64), normalizer=len(batch))
    return UnsupervisedResult(term, mask, classes, conf, weak_logits, weak_cache)


def mixup_loss(params, mixed):
    """Mean soft cross-entropy on mixed inputs; an empty batch scores 0."""
    if not mixed:
        return LossTerm.zero()
    return cross_entropy_term(params, np.stack([m.x for m in mixed]), np.stack([m.y for m in mixed]))


def random_mixup_batch(labeled, unlabeled, alpha, rng, size=None, pairing=None):
    """
    Pair samples uniformly from the combined labeled + pseudo-labeled pool,
    with no difficulty or dissimilarity structure. A labeled parent, when
    present, is the one weighted by gamma.
    Raises: DomainError when the combined pool holds fewer than two samples.
    """
    sources = [(LABELED, labeled), (UNLABELED, unlabeled)]
    refs = [(src, batch, pos) for src, batch in sources for pos in range(len(batch))]
    n = len(refs)
    if n < 2:
        raise DomainError(f"Random mixup needs at least two samples in the combined pool, got {n}.")
    count = len(labeled) if size is None else size
    mixed = []
    for _ in range(count):
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        if refs[i][0] != LABELED and refs[j][0] == LABELED:
            i, j = j, i
        parents = []
        for src, batch, pos in (refs[i], refs[j]):
            parents.append(MixCandidate(batch.inputs[pos], batch.targets[pos], ParentRef(src, int(batch.ids[pos]), None)))
        gamma = draw_gamma(pairing, rng) if pairing is not None else sample_beta(alpha, rng)
        sample = mix_pair(parents[0], parents[1], gamma)
        sample.arm = "random"
        mixed.append(sample)
    return mixed


# --- Evaluation ---
def evaluate(params, inputs, labels, num_bins=DEFAULT_NUM_BINS):
    """Test-set CalibrationReport (ECE, MCE, error rate, reliability bins)."""
    logits, _ = forward(params, np.atleast_2d(inputs))
    return calibration_report(RecordSet.from_probabilities(softmax(logits), labels), num_bins)


# --- Training loop ---
class Trainer:
    """Owns the model, optimizer and margin trackers for one seeded run."""

    def __init__(self, cfg, aug_spec, data, hidden, rng, dump_dir=None):
        self.cfg = cfg
        self.num_classes = cfg.num_classes or data.num_classes
        self.dims = [data.dim] + list(hidden) + [self.num_classes]
        init_rng, self.batch_rng, self.aug_rng, self.mix_rng = rng.spawn(4)
        self.params = init_params(self.dims, init_rng)
        self.opt = init_optimizer(self.params, cfg.momentum, cfg.lr, max(cfg.total_steps, 1), cfg.schedule,
                                  cfg.weight_decay)
        self.augmenter = Augmenter(aug_spec, data.train_feature_std(), data.grid_shape)
        self.aum = MarginTracker(self.num_classes, cfg.delta, form=cfg.aum_form, name="aum")
        self.apm = MarginTracker(self.num_classes, cfg.delta, form="ema", name="apm")
        self.aum.register(data.labeled.ids)
        self.apm.register(data.unlabeled.ids)
        self.counters = MixupDiagnostics()
        self.dump_dir = dump_dir
        self._vault = data.vault
        self._components = {}

    def train_step(self, labeled, unlabeled):
        """
        One step: supervised term and AUM update, pseudo-labels with APM
        update, difficulty split and mixup (after warmup), then a single
        optimizer step on the summed gradient.
        Raises: TrainingAbortedError on a non-finite loss or gradient.
        """
        t = self.opt.step
        lr = cosine_lr(self.opt)
        self._components = {"step": t, "lr": lr}
        try:
            breakdown, grads = self._losses(labeled, unlabeled, t, lr)
            sgd_momentum_step(self.params, grads, self.opt)
        except NumericError as e:
            dump = self._write_dump(t, str(e))
            logging.error(f"Training aborted at step {t}: {e}", exc_info=True)
            raise TrainingAbortedError(f"Non-finite value at step {t}: {e}", dump) from e
        logging.debug(f"Step {t}: L_L={breakdown.L_L:.4f} L_U={breakdown.L_U:.4f} "
                      f"L_mixup={breakdown.L_mixup:.4f} mask={breakdown.mask_rate:.2f}")
        return breakdown

    def _losses(self, labeled, unlabeled, t, lr):
        cfg, params = self.cfg, self.params
        in_warmup = t < cfg.resolved_warmup_steps
        iteration = t + 1
        if in_warmup:
            self.counters["warmup_steps"] += 1

        sup = supervised_loss(params, labeled, self.augmenter, self.aug_rng, cfg.smoothing)
        self._components["L_L"] = sup.value
        self.aum.update_batch(labeled.ids, sup.logits, labeled.labels, iteration)

        unsup, mask_rate, impurity_pct = None, 0.0, 0.0
        un_term = LossTerm.zero()
        if len(unlabeled):
            unsup = unsupervised_loss(params, unlabeled, cfg.threshold, self.augmenter, self.aug_rng, cfg.smoothing)
            mask_rate = unsup.mask_rate
            impurity_pct = self._impurity(unlabeled.ids, unsup)
            tracked = np.ones(len(unlabeled), dtype=bool) if cfg.track_masked_margins else unsup.mask
            self.apm.update_batch(unlabeled.ids[tracked], unsup.weak_logits[tracked],
                                  unsup.pseudo_labels[tracked], iteration, all_classes=cfg.apm_all_classes)
            if not (in_warmup and cfg.warmup_gates_unsupervised):
                un_term = unsup.term
        self._components.update(L_U=un_term.value, mask_rate=mask_rate, impurity=impurity_pct)

        mixed = []
        if cfg.mixup_mode != "none" and not in_warmup:
            mixed = self._mixup_batch(labeled, unlabeled, sup, unsup)
        mix_term = mixup_loss(params, mixed)
        self._components["L_mixup"] = mix_term.value

        total = sup.value + cfg.lambda_u * un_term.value + mix_term.value
        self._components["total"] = total
        if not np.isfinite(total):
            raise NumericError(f"total loss is {total}")
        grads = sup.gradients(params) + un_term.gradients(params).scaled(cfg.lambda_u) + mix_term.gradients(params)
        breakdown = LossBreakdown(step=t + 1, lr=lr, L_L=sup.value, L_U=un_term.value, L_mixup=mix_term.value,
                                  total=total, mask_rate=mask_rate, impurity=impurity_pct, mixed=len(mixed))
        return breakdown, grads

    def _impurity(self, ids, unsup):
        records = RecordSet(unsup.confidences, unsup.pseudo_labels, self._vault.labels_for(ids))
        result = impurity(records, self.cfg.threshold)
        if result.empty:
            self.counters["empty_impurity"] += 1
        return result.percent

    def _mixup_batch(self, labeled, unlabeled, sup, unsup):
        cfg = self.cfg
        penultimate = cfg.pairing.representation == "penultimate-features"
        lab_batch = SampleBatch(labeled.ids, labeled.inputs, _targets(labeled.labels, self.num_classes, cfg.smoothing),
                                penultimate_features(sup.cache) if penultimate else None)
        if unsup is not None:
            keep = unsup.mask if cfg.restrict_pools_to_confident else np.ones(len(unlabeled), dtype=bool)
            unl_batch = SampleBatch(unlabeled.ids[keep], unlabeled.inputs[keep],
                                    _targets(unsup.pseudo_labels[keep], self.num_classes, cfg.smoothing),
                                    penultimate_features(unsup.weak_cache)[keep] if penultimate else None)
            unl_classes = unsup.pseudo_labels[keep]
        else:
            unl_batch = SampleBatch(np.zeros(0), np.zeros((0, labeled.inputs.shape[1])), np.zeros((0, self.num_classes)),
                                    np.zeros((0, lab_batch.representations.shape[1])) if penultimate else None)
            unl_classes = np.zeros(0, dtype=np.int64)

        if cfg.mixup_mode == "random-mixup":
            if len(lab_batch) + len(unl_batch) < 2:
                self.counters["skipped:random"] += 1
                return []
            mixed = random_mixup_batch(lab_batch, unl_batch, cfg.pairing.alpha, self.mix_rng,
                                       size=cfg.resolved_mixup_batch_size, pairing=cfg.pairing)
            self.counters["random"] += len(mixed)
            return mixed

        split_l = split_by_median(self.aum.values_for(labeled.ids, labeled.labels))
        if len(unl_batch):
            split_u = split_by_median(self.apm.values_for(unl_batch.ids, unl_classes))
        else:
            split_u = SplitHalf.empty()
        self.counters["difficulty_splits"] += 1
        return build_mixup_batch(DifficultySplit(split_l, split_u), lab_batch, unl_batch,
                                 cfg.pairing, self.mix_rng, self.counters)

    def _write_dump(self, t, reason):
        if not self.dump_dir:
            return None
        payload = {
            "step": t,
            "reason": reason,
            "components": self._components,
            "counters": dict(self.counters),
            "layer_norms": [{"W": float(np.linalg.norm(w)), "b": float(np.linalg.norm(b))}
                            for w, b in zip(self.params.weights, self.params.biases)],
        }
        path = os.path.join(self.dump_dir, f"abort_step{t}.json")
        atomic_write_text(path, json.dumps(payload, indent=2, default=float))
        logging.error(f"Wrote diagnostic dump: {path}")
        return path

    def evaluate(self, inputs, labels, num_bins=DEFAULT_NUM_BINS):
        return evaluate(self.params, inputs, labels, num_bins)

    def save(self, path):
        return save_checkpoint(path, self.params, self.opt, {"aum": self.aum.snapshot(), "apm": self.apm.snapshot()})

    def load(self, path):
        """Restore model, optimizer and both trackers from a checkpoint."""
        params, opt, sections = load_checkpoint(path)
        if params.dims != self.dims:
            raise ParameterError(f"Checkpoint dims {params.dims} do not match trainer dims {self.dims}.")
        self.params = params
        if opt is not None:
            self.opt = opt
        if "aum" in sections:
            self.aum = MarginTracker.restore(sections["aum"], name="aum")
        if "apm" in sections:
            self.apm = MarginTracker.restore(sections["apm"], name="apm")


@dataclass
class RunResult:
    history: List[dict]
    params: object
    report: object = None # final test CalibrationReport, None without a test split
    counters: dict = field(default_factory=dict)
    trainer: Optional[Trainer] = None


def train_run(cfg, aug_spec, data, seed, hidden=(64, 64), log_every=100, num_bins=DEFAULT_NUM_BINS,
              dump_dir=None, checkpoint_path=None):
    """
    Train for cfg.total_steps steps. A metric row is logged every ``log_every``
    steps and at the final step; each row carries the current test error and ECE.
    Returns: RunResult. T = 0 returns the initial model with an empty history.
    """
    trainer = Trainer(cfg, aug_spec, data, hidden, Rng(seed), dump_dir=dump_dir)
    has_test = len(data.test) > 0
    history = []
    if cfg.total_steps == 0:
        report = trainer.evaluate(data.test.inputs, data.test.labels, num_bins) if has_test else None
        return RunResult(history, trainer.params, report, dict(trainer.counters), trainer)

    batches = iterate_batches(data, cfg.labeled_batch_size, cfg.resolved_unlabeled_batch_size, trainer.batch_rng,
                              require_unlabeled=False)
    logging.info(f"Training seed {seed}: {cfg.total_steps} steps, mode={cfg.mixup_mode}, "
                 f"warmup={cfg.resolved_warmup_steps}, dims={trainer.dims}")
    report = None
    for t in range(cfg.total_steps):
        labeled, unlabeled = next(batches)
        try:
            breakdown = trainer.train_step(labeled, unlabeled)
        except TrainingAbortedError as e:
            e.history = history
            raise
        last = t == cfg.total_steps - 1
        if (t + 1) % log_every == 0 or last:
            row = breakdown.as_row()
            if has_test:
                report = trainer.evaluate(data.test.inputs, data.test.labels, num_bins)
                row.update(test_error=report.error_rate, test_ece=report.ece)
            history.append(row)
            logging.info(f"Seed {seed} step {breakdown.step}/{cfg.total_steps}: total={breakdown.total:.4f} "
                         f"mask={breakdown.mask_rate:.2f} test_ece={row.get('test_ece', float('nan')):.2f}")
    if checkpoint_path:
        trainer.save(checkpoint_path)
    return RunResult(history, trainer.params, report, dict(trainer.counters), trainer)
