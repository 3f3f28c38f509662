"""One-shot structured scoring and global bottom-k neuron selection."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .backprop import loss_and_grads
from .data import Dataset
from .errors import FormatError, IntegrityError, UsageError
from .model import ModelSpec, fingerprint, mlp_names, model_fingerprint, validate_weights
from .stats import StatsReport
from .train import cross_entropy

log = logging.getLogger(__name__)

CRITERIA = ("variance", "magnitude", "snip", "random")


@dataclass(frozen=True)
class NeuronScore:
    layer: int
    neuron: int
    score: float


@dataclass
class PruningPlan:
    layers: list                       # ascending pruned indices per MLP
    criterion: str
    rate: float
    tap: Optional[str] = None          # stats location the scores came from
    min_keep: int = 1
    seed: Optional[int] = None
    stats_fingerprint: Optional[str] = None
    model_fingerprint: Optional[str] = None
    guarded: list = field(default_factory=list)  # layers where min_keep skipped a victim

    @property
    def total(self) -> int:
        return sum(len(l) for l in self.layers)

    def to_dict(self) -> dict:
        d = {
            "criterion": self.criterion,
            "rate": self.rate,
            "tap": self.tap,
            "min_keep": self.min_keep,
            "stats_fingerprint": self.stats_fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "layers": [{"name": f"block.{i}.mlp", "pruned": list(map(int, idx))}
                       for i, idx in enumerate(self.layers)],
        }
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    def to_bytes(self) -> bytes:
        return io.dumps(self.to_dict()).encode("utf-8")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_bytes())

    def save(self, path) -> str:
        data = self.to_bytes()
        io.atomic_write_bytes(path, data)
        return fingerprint(data)

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        try:
            return cls(
                layers=[sorted(int(j) for j in l["pruned"]) for l in d["layers"]],
                criterion=d["criterion"], rate=float(d["rate"]), tap=d.get("tap"),
                min_keep=int(d.get("min_keep", 1)), seed=d.get("seed"),
                stats_fingerprint=d.get("stats_fingerprint"),
                model_fingerprint=d.get("model_fingerprint"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed plan: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "PruningPlan":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable plan: {exc}") from exc
        return cls.from_dict(d)


def empty_plan(spec: ModelSpec, criterion: str = "variance") -> PruningPlan:
    return PruningPlan([[] for _ in spec.blocks], criterion, 0.0)


def _flatten(per_layer) -> list:
    return [NeuronScore(l, i, float(s)) for l, arr in enumerate(per_layer) for i, s in enumerate(arr)]


def score_variance(report: StatsReport, spec: Optional[ModelSpec] = None) -> list:
    if spec is not None:
        if len(report.layers) != len(spec.blocks) or any(
                l.variance.shape != (h,) for l, h in zip(report.layers, spec.hidden_sizes)):
            raise IntegrityError("statistics do not cover the model's MLP layers")
    return _flatten([l.variance for l in report.layers])


def score_magnitude(spec: ModelSpec, weights: dict) -> list:
    """Fan-in L1 norm of each hidden neuron: ``sum_j |W1[i, j]| + |b1[i]|``."""
    validate_weights(spec, weights)
    per_layer = []
    for i in range(len(spec.blocks)):
        w1, b1, _, _ = mlp_names(i)
        per_layer.append(np.abs(weights[w1].astype(np.float64)).sum(axis=1)
                         + np.abs(weights[b1].astype(np.float64)))
    return _flatten(per_layer)


def score_snip(spec: ModelSpec, weights: dict, dataset: Dataset, batches: int = 1,
               batch_size: int = 32) -> list:
    """Connection sensitivity summed over each neuron's fan-in:
    ``sum_j |W1[i, j] g(W1[i, j])| + |b1[i] g(b1[i])|`` per batch, summed over
    the first ``batches`` batches, with cross-entropy gradients."""
    if not dataset.labeled:
        raise UsageError("SNIP scoring needs a labeled dataset")
    if batches < 1:
        raise UsageError("batches must be >= 1")
    validate_weights(spec, weights)
    per_layer = [np.zeros(h) for h in spec.hidden_sizes]
    for b, (xb, yb) in enumerate(dataset.batches(batch_size)):
        if b >= batches:
            break
        _, _, g = loss_and_grads(spec, weights, xb, lambda z: cross_entropy(z, yb))
        for i in range(len(spec.blocks)):
            w1, b1, _, _ = mlp_names(i)
            per_layer[i] += (np.abs(weights[w1].astype(np.float64) * g[w1]).sum(axis=1)
                             + np.abs(weights[b1].astype(np.float64) * g[b1]))
    return _flatten(per_layer)


def score_random(spec: ModelSpec, seed: int = 0) -> list:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _flatten([rng.random(h) for h in spec.hidden_sizes])


def global_select(scores, rate: float, min_keep: int = 1, hidden_sizes=None) -> PruningPlan:
    """Prune the ``floor(rate * total)`` smallest scores over all layers.

    Ordering is ``(score, layer, neuron)`` ascending. A candidate whose layer
    already sits at ``min_keep`` survivors is skipped and the next candidate
    takes its place. ``hidden_sizes`` defaults to the widths implied by
    ``scores``. Criterion metadata is left for the caller to fill in.
    """
    if not 0.0 < rate < 1.0:
        raise UsageError(f"pruning rate must lie in (0, 1), got {rate}")
    if min_keep < 1:
        raise UsageError("min_keep must be >= 1")
    scores = list(scores)
    if hidden_sizes is None:
        n_layers = max(s.layer for s in scores) + 1
        hidden_sizes = [0] * n_layers
        for s in scores:
            hidden_sizes[s.layer] = max(hidden_sizes[s.layer], s.neuron + 1)
    if any(not math.isfinite(s.score) for s in scores):
        raise UsageError("scores must be finite")
    total = sum(hidden_sizes)
    k = math.floor(round(rate * total, 9))  # absorbs 0.29 * 100 = 28.999...96
    layers = [[] for _ in hidden_sizes]
    guarded = set()
    if k == 0:
        log.warning("rate %s of %d neurons selects nothing; plan is empty", rate, total)
    else:
        taken = 0
        for s in sorted(scores, key=lambda s: (s.score, s.layer, s.neuron)):
            if hidden_sizes[s.layer] - len(layers[s.layer]) <= min_keep:
                guarded.add(s.layer)
                continue
            layers[s.layer].append(s.neuron)
            taken += 1
            if taken == k:
                break
        if guarded:
            log.info("min_keep=%d guard held back neurons in layers %s", min_keep, sorted(guarded))
    return PruningPlan([sorted(l) for l in layers], criterion="", rate=rate, min_keep=min_keep,
                       guarded=sorted(guarded))


def make_plan(spec: ModelSpec, weights: dict, rate: float, criterion: str = "variance",
              report: Optional[StatsReport] = None, dataset: Optional[Dataset] = None,
              min_keep: int = 1, seed: int = 0, snip_batches: int = 1) -> PruningPlan:
    """Score with ``criterion`` and select globally, recording provenance."""
    model_fp = model_fingerprint(spec, weights)
    if report is not None and report.model_fingerprint != model_fp:
        raise IntegrityError(
            f"statistics were collected on model {report.model_fingerprint}, not {model_fp}")
    if criterion == "variance":
        if report is None:
            raise UsageError("the variance criterion needs a statistics report")
        scores = score_variance(report, spec)
    elif criterion == "magnitude":
        scores = score_magnitude(spec, weights)
    elif criterion == "snip":
        if dataset is None:
            raise UsageError("the snip criterion needs a labeled dataset")
        scores = score_snip(spec, weights, dataset, snip_batches)
    elif criterion == "random":
        scores = score_random(spec, seed)
    else:
        raise UsageError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    plan = global_select(scores, rate, min_keep, spec.hidden_sizes)
    plan.criterion = criterion
    plan.seed = seed if criterion == "random" else None
    plan.model_fingerprint = model_fp
    if criterion == "variance":
        plan.tap = report.tap
        plan.stats_fingerprint = report.fingerprint
    return plan


SUMMARY_HEADER = ["layer", "d_hid", "pruned", "fraction"]


def plan_summary(plan: PruningPlan, spec: ModelSpec) -> list:
    return [[i, h, len(idx), len(idx) / h] for i, (idx, h) in enumerate(zip(plan.layers, spec.hidden_sizes))]
