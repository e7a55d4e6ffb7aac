"""Mini-batch AdamW loop over training triplets."""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, compute_losses
from .params import save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "l_ret", "l_cont", "l_det", "l_prop", "grad_norm", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    warmup_fraction: float = 0.10
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int | None = None  # optional cap on total updates

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(lr=2e-5, epochs=5, batch_size=256),
}


class TrainingDiverged(RuntimeError):
    pass


def clip_gradients(g, max_norm):
    """Rescale ``g`` to ``max_norm`` when longer; returns ``(clipped, norm_before)``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm > max_norm:
        return g * (max_norm / norm), norm
    return g, norm


def lr_at(step, total_steps, cfg):
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    warmup = cfg.warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    return cfg.lr


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(params, grads, state, lr, cfg=TrainConfig()):
    """Decoupled weight decay followed by the bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("shape mismatch between params, grads and state")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    new = params * (1 - lr * cfg.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, AdamState(m, v, t)


@dataclass
class TrainResult:
    params: object
    log: list = field(default_factory=list)
    epoch_means: list = field(default_factory=list)


def _dump(batch):
    texts = batch.query_texts or ["<unnamed>"] * batch.size
    return "; ".join(f"{t!r} -> {c}" for t, c in zip(texts, batch.conditions))


def train(dataset, params, make_batch, cfg=TrainConfig(), loss_cfg=LossConfig(),
          log_path=None, checkpoint_path=None, callback=None):
    """Train ``params`` in place.

    ``dataset`` is any sequence; ``make_batch`` turns a list of its items
    into a :class:`TrainingBatch`. The permutation of each epoch is drawn
    from ``cfg.seed`` so identical inputs give bitwise-identical results.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty training set")
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    rng = np.random.default_rng([cfg.seed, 7])
    state = AdamState.zeros(params.vector.size)
    result = TrainResult(params)
    step = 0
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                if step >= total:
                    break
                batch = make_batch([dataset[i] for i in order[start:start + cfg.batch_size]])
                res = compute_losses(params, batch, loss_cfg)
                if not math.isfinite(res.total) or not np.all(np.isfinite(res.grad.vector)):
                    raise TrainingDiverged(f"non-finite loss at step {step + 1}: {res.parts}; batch: {_dump(batch)}")
                grad, _ = clip_gradients(res.grad.vector, cfg.clip_norm)
                step += 1
                lr = lr_at(step, total, cfg)
                params.vector[...], state = adamw_step(params.vector, grad, state, lr, cfg)
                p = res.parts
                row = (step, res.total, p["ret"], p["cont"], p["det"], p["prop"], float(np.linalg.norm(grad)), lr)
                result.log.append(row)
                losses.append(res.total)
                if writer is not None:
                    writer.writerow([step] + [repr(float(x)) for x in row[1:]])
            if losses:
                result.epoch_means.append(float(np.mean(losses)))
                log.info("epoch %d: mean loss %.5f", epoch + 1, result.epoch_means[-1])
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params, cfg.seed)
            if callback is not None:
                callback(epoch, params)
            if step >= total:
                break
    finally:
        if fh is not None:
            fh.close()
    return result
