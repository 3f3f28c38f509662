"""Evaluation, distillation loss and AdamW fine-tuning with a cosine schedule."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backprop import loss_and_grads
from .data import Dataset
from .errors import NumericError, UsageError
from .model import ModelSpec, run, validate_weights
from .tensor import STORAGE, log_softmax, softmax

REFERENCE_LR = 1.5e-5
LOG_HEADER = ["epoch", "lr", "train_loss", "val_top1", "wall_seconds"]


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    kd: bool = True
    alpha: float = 0.5
    temperature: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise UsageError("alpha must lie in [0, 1]")
        if not self.temperature > 0:
            raise UsageError("temperature must be positive")
        if self.batch_size < 1 or self.lr < 0:
            raise UsageError("batch_size must be >= 1 and lr >= 0")


def logits_for(spec: ModelSpec, weights: dict, x, batch_size: int = 256) -> np.ndarray:
    out = [run(spec, weights, x[s: s + batch_size]) for s in range(0, len(x), batch_size)]
    return np.concatenate(out)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def kd_loss_and_grad(student_logits, teacher_logits, labels, alpha: float, temperature: float):
    """``(1-alpha) CE + alpha T^2 KL(softmax(t/T) || softmax(s/T))``, batch
    averaged, with its gradient with respect to the student logits."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise UsageError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    B = s.shape[0]
    ce, dce = cross_entropy(s, labels)
    T = temperature
    log_ps = log_softmax(s / T)
    log_pt = log_softmax(t / T)
    pt = np.exp(log_pt)
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    dkl = T * (np.exp(log_ps) - pt) / B  # d(T^2 KL)/ds
    return (1 - alpha) * ce + alpha * T * T * kl, (1 - alpha) * dce + alpha * dkl


def kd_loss(student_logits, teacher_logits, labels, alpha: float = 0.5, temperature: float = 2.0) -> float:
    return kd_loss_and_grad(student_logits, teacher_logits, labels, alpha, temperature)[0]


def evaluate(spec: ModelSpec, weights: dict, dataset: Dataset, batch_size: int = 256) -> dict:
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    if not dataset.labeled:
        raise UsageError("evaluation needs a labeled dataset")
    validate_weights(spec, weights)
    logits = logits_for(spec, weights, dataset.x, batch_size)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits during evaluation")
    top1 = float((logits.argmax(axis=1) == dataset.y).mean())
    loss, _ = cross_entropy(logits, dataset.y)
    return {"top1": top1, "loss": loss}


def retention(pruned_top1: float, dense_top1: float) -> float:
    return pruned_top1 / dense_top1 if dense_top1 > 0 else float("nan")


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to 0 at the final step."""
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AdamW:
    """Adam with decoupled weight decay, float64 moments."""

    def __init__(self, params: dict, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            gk = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * gk
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * gk * gk
            if lr == 0:
                continue
            p *= 1 - lr * self.wd
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def finetune(spec: ModelSpec, weights: dict, dataset: Dataset, config: FinetuneConfig,
             teacher=None, val: Optional[Dataset] = None):
    """Train ``weights`` in place of a copy; returns ``(best_weights, log_rows)``.

    ``teacher`` is an optional ``(spec, weights)`` pair used for distillation
    when ``config.kd`` is set. Checkpoint selection keeps the epoch with the
    best top-1 on ``val`` (the training set when ``val`` is None); ties keep
    the earlier epoch.
    """
    validate_weights(spec, weights)
    if not dataset.labeled:
        raise UsageError("fine-tuning needs a labeled dataset")
    use_kd = config.kd and teacher is not None
    if use_kd:
        t_spec, t_weights = teacher
        if t_spec.num_classes != spec.num_classes:
            raise UsageError(f"teacher has {t_spec.num_classes} classes, student {spec.num_classes}")
    val = dataset if val is None else val

    params = {k: v.astype(np.float64) for k, v in weights.items()}
    opt = AdamW(params, config.weight_decay, config.betas, config.eps)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    steps_per_epoch = -(-len(dataset) // config.batch_size)
    total = config.epochs * steps_per_epoch
    best = ({k: v.copy() for k, v in weights.items()}, -1.0)
    log, step = [], 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        epoch_lr = cosine_lr(config.lr, step, total)
        losses = []
        for xb, yb in dataset.batches(config.batch_size, order):
            if use_kd:
                tl = run(t_spec, t_weights, xb)
                loss_fn = lambda z: kd_loss_and_grad(z, tl, yb, config.alpha, config.temperature)
            else:
                loss_fn = lambda z: cross_entropy(z, yb)
            loss, _, grads = loss_and_grads(spec, params, xb, loss_fn)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step(params, grads, cosine_lr(config.lr, step, total))
            losses.append(loss * len(yb))
            step += 1
        current = {k: v.astype(STORAGE) for k, v in params.items()}
        top1 = evaluate(spec, current, val)["top1"]
        if top1 > best[1]:
            best = (current, top1)
        log.append([epoch, epoch_lr, sum(losses) / len(dataset), top1, time.perf_counter() - t0])
    return best[0], log
