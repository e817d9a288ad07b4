"""
Small fully-connected classifier with explicit forward/backward passes,
SGD with momentum and annealed learning-rate schedules.

Weights are stored (fan_in, fan_out), so a layer computes ``a @ W + b``
(logits = W^T x + b for a single vector). Hidden layers use ReLU, the output
layer is the identity; softmax belongs to the losses.
"""
import os
import math
import logging
import tempfile
from dataclasses import dataclass, field

import numpy as np

from utils import DimensionError, NumericError, ParameterError, UsageError, FormatError, publish_file

CHECKPOINT_VERSION = 1
SCHEDULES = ("cosine", "fixmatch", "constant")


@dataclass
class ModelParams:
    weights: list
    biases: list
    revision: int = 0 # bumped by every optimizer step; caches remember it

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_layers(self):
        return len(self.weights)


@dataclass
class Gradients:
    weights: list
    biases: list

    def __add__(self, other):
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def scaled(self, factor):
        return Gradients([factor * w for w in self.weights], [factor * b for b in self.biases])

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


@dataclass
class ForwardCache:
    activations: list # input to each layer; activations[0] is x
    pre_activations: list # z of each layer
    revision: int
    dims: list
    single: bool # True when the forward call got a single vector


@dataclass
class OptimizerState:
    momentum: float = 0.9
    base_lr: float = 0.03
    total_steps: int = 1
    step: int = 0
    schedule: str = "cosine"
    weight_decay: float = 0.0 # L2 on weights only; biases are not decayed
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"Momentum must be in [0, 1), got {self.momentum}.")
        if not self.base_lr > 0.0:
            raise ParameterError(f"Base learning rate must be > 0, got {self.base_lr}.")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"Unknown learning-rate schedule '{self.schedule}'. Expected one of {SCHEDULES}.")
        if self.weight_decay < 0.0:
            raise ParameterError(f"Weight decay must be >= 0, got {self.weight_decay}.")


def init_params(dims, rng):
    """
    Initialise an MLP with layer sizes ``dims`` = [D, H1, ..., C].
    Weights ~ N(0, 1/fan_in), biases zero.
    Raises: ParameterError for fewer than two sizes or any size < 1.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ParameterError(f"Layer sizes must be at least [input, output] and all >= 1, got {dims}.")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    logging.debug(f"Initialised MLP with dims {dims}.")
    return ModelParams(weights, biases)


def init_optimizer(params, momentum=0.9, base_lr=0.03, total_steps=1, schedule="cosine", weight_decay=0.0):
    opt = OptimizerState(momentum=momentum, base_lr=base_lr, total_steps=total_steps, schedule=schedule,
                         weight_decay=weight_decay)
    opt.velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    return opt


def forward(params, x):
    """
    Run the network on a vector (D,) or a batch (N, D).
    Returns: (logits, cache) where logits has shape (C,) or (N, C).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(f"Input has shape {x.shape}; model expects dimension {params.weights[0].shape[0]}.")
    activations, pre_activations = [a], []
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        pre_activations.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        if i != last:
            activations.append(a)
    logits = a[0] if single else a
    cache = ForwardCache(activations, pre_activations, params.revision, params.dims, single)
    return logits, cache


def penultimate_features(cache):
    """Input to the output layer (the last hidden activation, or x for a linear model)."""
    feats = cache.activations[-1]
    return feats[0] if cache.single else feats


def backward(params, cache, d_logits):
    """
    Backpropagate dLoss/dlogits through the network.
    For batch input, ``d_logits`` must already carry any 1/N factor; gradients
    are summed over rows.
    Raises: UsageError if the cache came from a different parameter revision or shape.
    """
    if cache.revision != params.revision or cache.dims != params.dims:
        raise UsageError("Forward cache does not match the current parameters (stale or foreign cache).")
    delta = np.asarray(d_logits, dtype=np.float64)
    if cache.single:
        delta = delta[None, :]
    if delta.shape != cache.pre_activations[-1].shape:
        raise DimensionError(f"d_logits shape {np.shape(d_logits)} does not match logits shape.")
    n_layers = params.num_layers
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = cache.activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (cache.pre_activations[i - 1] > 0.0)
    return Gradients(grad_w, grad_b)


def cosine_lr(opt):
    """
    Learning rate at the optimizer's current step.
    cosine:   eta0 * (1 + cos(pi t / T)) / 2
    fixmatch: eta0 * cos(7 pi t / (16 T))
    constant: eta0
    """
    if opt.total_steps <= 0:
        raise ParameterError("Total steps T must be > 0 for the learning-rate schedule.")
    t, T = opt.step, opt.total_steps
    if not 0 <= t <= T:
        raise UsageError(f"Step {t} outside schedule range [0, {T}].")
    if opt.schedule == "constant":
        return opt.base_lr
    if opt.schedule == "fixmatch":
        return opt.base_lr * math.cos(7.0 * math.pi * t / (16.0 * T))
    return opt.base_lr * (1.0 + math.cos(math.pi * t / T)) / 2.0


def sgd_momentum_step(params, grads, opt):
    """
    v <- mu v + g; theta <- theta - eta(t) v; t <- t + 1. Updates in place.
    With weight decay, g for a weight matrix W is g + wd * W.
    Returns: (params, opt)
    Raises: NumericError naming the first layer with a non-finite gradient.
    """
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != params.weights[i].shape or gb.shape != params.biases[i].shape:
            raise DimensionError(f"Gradient shape mismatch at layer {i}.")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError(f"Non-finite gradient in layer {i}.")
    if not opt.velocity:
        opt.velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(params.weights, params.biases)]
    lr = cosine_lr(opt)
    new_velocity = []
    for i, ((vw, vb), gw, gb) in enumerate(zip(opt.velocity, grads.weights, grads.biases)):
        if opt.weight_decay:
            gw = gw + opt.weight_decay * params.weights[i]
        vw = opt.momentum * vw + gw
        vb = opt.momentum * vb + gb
        params.weights[i] -= lr * vw
        params.biases[i] -= lr * vb
        new_velocity.append((vw, vb))
    opt.velocity = new_velocity
    opt.step += 1
    params.revision += 1
    return params, opt


# --- Checkpoint container ---
def save_checkpoint(path, params, opt=None, sections=None):
    """
    Write a versioned .npz checkpoint: layer shapes and row-major float64
    values, optional optimizer buffers, and named table sections (margin
    trackers). Written to a temp file and renamed.
    """
    arrays = {"format_version": np.array(CHECKPOINT_VERSION, dtype=np.int64),
              "model/dims": np.array(params.dims, dtype=np.int64)}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"model/W{i}"] = w
        arrays[f"model/b{i}"] = b
    if opt is not None:
        arrays["optimizer/scalars"] = np.array([opt.momentum, opt.base_lr, opt.weight_decay], dtype=np.float64)
        arrays["optimizer/steps"] = np.array([opt.step, opt.total_steps], dtype=np.int64)
        arrays["optimizer/schedule"] = np.array(opt.schedule)
        for i, (vw, vb) in enumerate(opt.velocity):
            arrays[f"optimizer/vW{i}"] = vw
            arrays[f"optimizer/vb{i}"] = vb
    for name, table in (sections or {}).items():
        for key, value in table.items():
            arrays[f"section/{name}/{key}"] = np.asarray(value)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        publish_file(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise FormatError(f"Failed to write checkpoint '{path}': {e}") from e
    logging.info(f"Saved checkpoint: {path}")
    return path


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint.
    Returns: (params, opt or None, sections dict)
    Raises: FormatError on unreadable files, missing keys or a version mismatch.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {key: data[key] for key in data.files}
    except (OSError, ValueError) as e:
        raise FormatError(f"Cannot read checkpoint '{path}': {e}") from e
    if "format_version" not in arrays:
        raise FormatError(f"Checkpoint '{path}' has no format version.")
    version = int(arrays["format_version"])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Checkpoint '{path}' has version {version}; expected {CHECKPOINT_VERSION}.")
    try:
        dims = [int(d) for d in arrays["model/dims"]]
        n = len(dims) - 1
        params = ModelParams([arrays[f"model/W{i}"] for i in range(n)], [arrays[f"model/b{i}"] for i in range(n)])
    except KeyError as e:
        raise FormatError(f"Checkpoint '{path}' is missing model entry {e}.") from e
    if params.dims != dims:
        raise FormatError(f"Checkpoint '{path}' layer shapes do not match the declared dims {dims}.")

    opt = None
    if "optimizer/scalars" in arrays:
        scalars = [float(v) for v in arrays["optimizer/scalars"]]
        momentum, base_lr = scalars[:2]
        step, total = (int(v) for v in arrays["optimizer/steps"])
        opt = OptimizerState(momentum=momentum, base_lr=base_lr, total_steps=total, step=step,
                             schedule=str(arrays["optimizer/schedule"]),
                             weight_decay=scalars[2] if len(scalars) > 2 else 0.0)
        opt.velocity = [(arrays[f"optimizer/vW{i}"], arrays[f"optimizer/vb{i}"]) for i in range(n)]

    sections = {}
    for key, value in arrays.items():
        if key.startswith("section/"):
            _, name, field_name = key.split("/", 2)
            sections.setdefault(name, {})[field_name] = value
    return params, opt, sections
