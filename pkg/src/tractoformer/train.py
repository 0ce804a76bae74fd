"""Bundle-weighted direction loss, Adam, and the mini-batch training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, InvalidConfig, TrainingDiverged
from .model import ModelConfig, ModelParams, backward, forward, init_params, save_checkpoint
from .streamlines import SequenceBatch

log = logging.getLogger(__name__)

WEIGHTING_MODES = ("uniform", "softmax_fraction", "inverse_frequency")


def bundle_weights(counts, mode: str = "inverse_frequency") -> np.ndarray:
    """Per-class weights on the simplex.

    ``softmax_fraction`` applies the softmax to counts expressed as fractions
    of the total; ``inverse_frequency`` is proportional to total/count.
    """
    c = np.asarray(counts, dtype=float)
    if c.ndim != 1 or c.size < 1:
        raise InvalidArgument("counts must be a non-empty vector")
    if np.any(c < 0) or not np.any(c > 0):
        raise InvalidArgument("counts must be non-negative with at least one positive entry")
    if mode == "uniform":
        return np.full(c.size, 1.0 / c.size)
    if mode == "softmax_fraction":
        e = np.exp(c / c.sum())
        return e / e.sum()
    if mode == "inverse_frequency":
        if np.any(c == 0):
            raise InvalidArgument("inverse_frequency weighting needs every class count > 0")
        w = c.sum() / c
        return w / w.sum()
    raise InvalidArgument(f"unknown weighting mode {mode!r}")


def weighted_loss(predictions, targets, valid_mask, labels=None, weights=None, squared: bool = True):
    """Bundle-weighted direction error and its gradient w.r.t. ``predictions``.

    ``loss = 1/N * sum_i beta_{j(i)} / n_i * sum_{t valid} |y_hat - y|^p``
    with ``n_i`` the valid count of sequence ``i`` and ``p = 2`` (or 1 when
    ``squared`` is false). ``weights=None`` means beta = 1 for every sequence.
    """
    pred = np.asarray(predictions)
    diff = pred - np.asarray(targets, dtype=pred.dtype)
    mask = np.asarray(valid_mask, dtype=bool)
    N = pred.shape[0]
    if N == 0:
        raise InvalidArgument("empty batch")
    if weights is None:
        beta = np.ones(N, dtype=pred.dtype)
    else:
        lab = np.asarray(labels)
        w = np.asarray(weights, dtype=pred.dtype)
        if lab.shape != (N,) or np.any(lab < 0) or np.any(lab >= w.size):
            raise InvalidArgument(f"labels must index into {w.size} bundle weights")
        beta = w[lab]
    n_valid = np.maximum(mask.sum(axis=1), 1).astype(pred.dtype)
    coef = (beta / n_valid / N)[:, None] * mask  # (N, T)
    if squared:
        per = (diff * diff).sum(axis=-1)
        grad = 2.0 * coef[..., None] * diff
    else:
        per = np.sqrt((diff * diff).sum(axis=-1))
        safe = np.where(per > 0, per, 1.0)
        grad = coef[..., None] * diff / safe[..., None] * (per > 0)[..., None]
    loss = float((coef * per).sum())
    return loss, grad


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 20
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weighting_mode: str = "uniform"
    squared_loss: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise InvalidConfig(f"weighting_mode must be one of {WEIGHTING_MODES}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    for name in params.tensors:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDiverged(name)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)).astype(p.dtype)
    params.bump()
    return params, state


@dataclass
class FitResult:
    params: ModelParams
    best_params: ModelParams
    losses: list[float]
    best_epoch: int


def class_counts(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct labels and their counts; unlabeled (-1) sequences form no class."""
    lab = labels[labels >= 0]
    classes, counts = np.unique(lab, return_counts=True)
    return classes, counts


def fit(
    data: SequenceBatch,
    model_config: ModelConfig,
    config: TrainConfig,
    checkpoint: str | Path | None = None,
    init: ModelParams | None = None,
    use_weights: bool = True,
) -> FitResult:
    """Shuffled mini-batch Adam training.

    With ``checkpoint`` set, the final parameters are written there and the
    best-loss epoch to ``<checkpoint>.best``. ``use_weights=False`` bypasses
    bundle weighting entirely (beta = 1).
    """
    if len(data) == 0:
        raise InvalidArgument("empty training set")
    params = init.copy() if init is not None else init_params(model_config, config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)

    weights, lab_index = None, None
    if use_weights:
        classes, counts = class_counts(data.labels)
        if len(classes) == 0:
            classes, counts = np.array([-1]), np.array([len(data)])
        weights = bundle_weights(counts, config.weighting_mode)
        lookup = {int(c): i for i, c in enumerate(classes)}
        lab_index = np.array([lookup.get(int(x), 0) for x in data.labels])
        log.info("bundle weights (%s): %s", config.weighting_mode, dict(zip(classes.tolist(), weights.round(4).tolist())))

    state = AdamState()
    losses: list[float] = []
    best, best_epoch = params.copy(), -1
    best_loss = np.inf
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            mask = data.valid_mask[idx]
            # positions past the longest valid prefix cannot influence earlier ones
            T = int(mask.any(axis=0).nonzero()[0].max()) + 1
            trace = forward(params, data.features[idx, :T])
            loss, dpred = weighted_loss(
                trace.predictions,
                data.targets[idx, :T],
                mask[:, :T],
                None if weights is None else lab_index[idx],
                weights,
                config.squared_loss,
            )
            grads = backward(trace, dpred, params)
            adam_step(params, grads, state, config)
            total += loss * len(idx)
            seen += len(idx)
        epoch_loss = total / seen
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best, best_epoch = epoch_loss, params.copy(), epoch
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
    if checkpoint is not None:
        save_checkpoint(params, checkpoint)
        save_checkpoint(best, str(checkpoint) + ".best")
    return FitResult(params, best, losses, best_epoch)


def write_loss_curve(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.9g}\n")
