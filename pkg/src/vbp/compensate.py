"""Mean-shift compensation and weight compaction.

Pruned hidden neurons are replaced by their mean post-activation value; since
the second MLP linear is affine, that constant contribution ``W2 @ delta_mu``
folds into ``b2`` and the neuron's row of ``W1``/``b1`` and column of ``W2``
can be dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .errors import DimensionError, IntegrityError, PlanError, UsageError
from .model import (ModelSpec, check_plan_indices, mlp_names, model_fingerprint, prune_shape, run,
                    validate_weights)
from .stats import StatsReport
from .tensor import STORAGE

MODES = ("shift", "no-shift")


@dataclass
class CompensationRecord:
    layers: list              # per layer: {"layer", "pruned", "delta_mu", "bias_shift"}
    plan_fingerprint: Optional[str] = None

    def to_dict(self) -> dict:
        return {"plan_fingerprint": self.plan_fingerprint, "layers": self.layers}

    def save(self, path) -> None:
        io.atomic_write_text(path, io.dumps(self.to_dict()))


def _indices(indices, width: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise PlanError("duplicate pruned indices")
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise PlanError(f"pruned index out of range [0, {width})")
    return idx


def build_delta_mu(indices, mean, stats_tap: str = "post") -> np.ndarray:
    """Vector equal to ``mean`` on the pruned indices and zero elsewhere."""
    if stats_tap != "post":
        raise IntegrityError("compensation needs post-activation means; got "
                             f"{stats_tap!r}-activation statistics")
    mean = np.asarray(mean, dtype=np.float64)
    idx = _indices(indices, mean.shape[0])
    delta = np.zeros_like(mean)
    delta[idx] = mean[idx]
    return delta


def shift_bias(b2, w2, delta_mu) -> np.ndarray:
    """``b2 + W2 @ delta_mu``."""
    b2 = np.asarray(b2)
    w2 = np.asarray(w2)
    delta_mu = np.asarray(delta_mu)
    if w2.ndim != 2 or w2.shape != (b2.shape[0], delta_mu.shape[0]):
        raise DimensionError(f"shift_bias: W2 {w2.shape}, b2 {b2.shape}, delta {delta_mu.shape}")
    out = b2.astype(np.float64) + w2.astype(np.float64) @ delta_mu.astype(np.float64)
    return out.astype(STORAGE)


def compact(w1, b1, w2, indices):
    """Drop pruned rows of ``w1``/``b1`` and columns of ``w2``; survivors keep
    their order and bytes."""
    idx = _indices(indices, np.shape(w1)[0])
    keep = np.setdiff1d(np.arange(np.shape(w1)[0]), idx)
    return (np.ascontiguousarray(np.asarray(w1)[keep]), np.ascontiguousarray(np.asarray(b1)[keep]),
            np.ascontiguousarray(np.asarray(w2)[:, keep]))


def _check_chain(spec, weights, plan, stats: Optional[StatsReport]) -> None:
    if plan.model_fingerprint is None and stats is None:
        return
    fp = model_fingerprint(spec, weights)
    if plan.model_fingerprint is not None and plan.model_fingerprint != fp:
        raise IntegrityError(f"plan was built for model {plan.model_fingerprint}, not {fp}")
    if stats is None:
        return
    if stats.model_fingerprint != fp:
        raise IntegrityError(f"statistics come from model {stats.model_fingerprint}, not {fp}")
    if plan.stats_fingerprint is not None and plan.tap == stats.tap \
            and plan.stats_fingerprint != stats.fingerprint:
        raise IntegrityError(
            f"plan was built from statistics {plan.stats_fingerprint}, not {stats.fingerprint}")


def apply_plan(spec: ModelSpec, weights: dict, plan, stats: Optional[StatsReport] = None,
               mode: str = "shift"):
    """Prune every MLP per ``plan``; returns ``(spec', weights', record)``.

    ``mode="shift"`` folds the pruned neurons' post-activation means into
    ``b2`` before compacting; ``"no-shift"`` only compacts. A plan selected
    from pre-activation statistics is compensated with the post-activation
    report of the same model.
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    validate_weights(spec, weights)
    layers = check_plan_indices(spec, plan)
    if mode == "shift":
        if stats is None:
            raise UsageError("shift mode needs post-activation statistics")
        if stats.tap != "post":
            raise IntegrityError("compensation fed with pre-activation statistics")
    _check_chain(spec, weights, plan, stats)

    new_spec = prune_shape(spec, layers)
    out = dict(weights)
    records = []
    for i, idx in enumerate(layers):
        if not idx:
            continue
        w1, b1, w2, b2 = mlp_names(i)
        rec = {"layer": i, "pruned": list(idx)}
        if mode == "shift":
            delta = build_delta_mu(idx, stats.layers[i].mean, stats.tap)
            out[b2] = shift_bias(weights[b2], weights[w2], delta)
            rec["delta_mu"] = delta
            rec["bias_shift"] = out[b2].astype(np.float64) - weights[b2].astype(np.float64)
        out[w1], out[b1], out[w2] = compact(weights[w1], weights[b1], weights[w2], idx)
        records.append(rec)
    validate_weights(new_spec, out)
    return new_spec, out, CompensationRecord(records, getattr(plan, "fingerprint", None))


def mean_replacement_forward(spec: ModelSpec, weights: dict, plan, stats: StatsReport, x) -> np.ndarray:
    """Dense forward with pruned post-activations overwritten by their means.

    Ground truth for compensation: the compacted shift-mode model must match
    it for any plan and input.
    """
    layers = check_plan_indices(spec, plan)
    overwrite = {i: (np.asarray(idx, dtype=np.int64), stats.layers[i].mean[idx])
                 for i, idx in enumerate(layers) if idx}
    return run(spec, weights, x, overwrite=overwrite).astype(STORAGE)
