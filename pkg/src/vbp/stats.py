"""Streaming per-neuron activation statistics (Welford), shard merging,
statistics files and activation histograms."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .data import Dataset
from .errors import DimensionError, FormatError, InsufficientSamplesError, UsageError
from .model import ModelSpec, fingerprint, model_fingerprint, run, validate_weights

TAPS = ("pre", "post")


@dataclass
class WelfordAccumulator:
    """Running count, mean and sum of squared deviations (``m2``) per neuron."""

    width: int
    count: int = 0
    mean: np.ndarray = field(default=None, repr=False)
    m2: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.width)
        if self.m2 is None:
            self.m2 = np.zeros(self.width)

    def _check(self, n: int):
        if n != self.width:
            raise DimensionError(f"sample width {n} != accumulator width {self.width}")

    def update(self, h) -> "WelfordAccumulator":
        """Fold in one sample vector."""
        h = np.asarray(h, dtype=np.float64).reshape(-1)
        self._check(h.size)
        j = self.count + 1
        old = self.mean
        self.mean = ((j - 1) / j) * old + h / j
        self.m2 = np.maximum(self.m2 + (h - old) * (h - self.mean), 0.0)
        self.count = j
        return self

    def update_batch(self, rows) -> "WelfordAccumulator":
        """Fold in a block of samples (one per row) via a two-pass block
        summary and a pairwise merge."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimensionError(f"expected (samples, width), got {rows.shape}")
        self._check(rows.shape[1])
        if rows.shape[0] == 0:
            return self
        # shifting by the first row keeps constant columns exactly constant
        mu = rows[0] + (rows - rows[0]).mean(axis=0)
        dev = rows - mu
        block = WelfordAccumulator(self.width, rows.shape[0], mu, (dev * dev).sum(axis=0))
        merged = self.merge(block)
        self.count, self.mean, self.m2 = merged.count, merged.mean, merged.m2
        return self

    def merge(self, other: "WelfordAccumulator") -> "WelfordAccumulator":
        self._check(other.width)
        if other.count == 0:
            return WelfordAccumulator(self.width, self.count, self.mean.copy(), self.m2.copy())
        if self.count == 0:
            return WelfordAccumulator(self.width, other.count, other.mean.copy(), other.m2.copy())
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return WelfordAccumulator(self.width, n, mean, np.maximum(m2, 0.0))

    def finalize(self):
        """(mean, sample variance ``m2 / (N - 1)``)."""
        if self.count < 2:
            raise InsufficientSamplesError(f"variance needs at least 2 samples, have {self.count}")
        return self.mean.copy(), self.m2 / (self.count - 1)


def merge(a: WelfordAccumulator, b: WelfordAccumulator) -> WelfordAccumulator:
    return a.merge(b)


@dataclass
class LayerStats:
    name: str
    count: int
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class StatsReport:
    tap: str
    model_fingerprint: str
    layers: list

    def to_dict(self) -> dict:
        return {
            "model_fingerprint": self.model_fingerprint,
            "tap": self.tap,
            "layers": [{"name": l.name, "count": int(l.count), "mean": l.mean, "variance": l.variance}
                       for l in self.layers],
        }

    def to_bytes(self) -> bytes:
        return io.dumps(self.to_dict()).encode("utf-8")

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "StatsReport":
        try:
            d = json.loads(data.decode("utf-8"))
            if d["tap"] not in TAPS:
                raise ValueError(f"unknown tap {d['tap']!r}")
            layers = [LayerStats(l["name"], int(l["count"]), np.asarray(l["mean"], dtype=np.float64),
                                 np.asarray(l["variance"], dtype=np.float64)) for l in d["layers"]]
            return cls(d["tap"], d["model_fingerprint"], layers)
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"unreadable stats file: {exc!r}") from exc

    def save(self, path) -> str:
        data = self.to_bytes()
        io.atomic_write_bytes(path, data)
        return fingerprint(data)

    @classmethod
    def load(cls, path) -> "StatsReport":
        return cls.from_bytes(Path(path).read_bytes())


def _check_tap(tap: str):
    if tap not in TAPS:
        raise UsageError(f"tap must be one of {TAPS}, got {tap!r}")


def accumulate(spec: ModelSpec, weights: dict, dataset, batch_size: int = 64) -> dict:
    """Stream ``dataset`` through the model once; returns
    ``{"pre": [acc per layer], "post": [acc per layer]}``. Every token row of
    every sample is one observation."""
    validate_weights(spec, weights)
    x = dataset.x if isinstance(dataset, Dataset) else np.asarray(dataset)
    if x.ndim != 3 or x.shape[1:] != spec.input_shape:
        raise DimensionError(f"dataset shape {x.shape} does not match model input {spec.input_shape}")
    if x.shape[0] == 0:
        raise InsufficientSamplesError("empty dataset")
    accs = {t: [WelfordAccumulator(h) for h in spec.hidden_sizes] for t in TAPS}

    def sink(i):
        def _sink(pre, post):
            accs["pre"][i].update_batch(pre)
            accs["post"][i].update_batch(post)
        return _sink

    taps = {i: sink(i) for i in range(len(spec.blocks))}
    for s in range(0, x.shape[0], batch_size):
        run(spec, weights, x[s: s + batch_size], taps=taps)
    return accs


def report_from(accs: list, tap: str, model_fp: str) -> StatsReport:
    layers = []
    for i, acc in enumerate(accs):
        mean, var = acc.finalize()
        layers.append(LayerStats(f"block.{i}.mlp", acc.count, mean, var))
    return StatsReport(tap, model_fp, layers)


def collect_both(spec: ModelSpec, weights: dict, dataset, batch_size: int = 64) -> dict:
    """Pre- and post-activation reports from a single pass."""
    accs = accumulate(spec, weights, dataset, batch_size)
    fp = model_fingerprint(spec, weights)
    return {t: report_from(accs[t], t, fp) for t in TAPS}


def collect(spec: ModelSpec, weights: dict, dataset, tap: str = "post", batch_size: int = 64) -> StatsReport:
    _check_tap(tap)
    return collect_both(spec, weights, dataset, batch_size)[tap]


def record_activations(spec: ModelSpec, weights: dict, dataset, layers, batch_size: int = 64) -> dict:
    """Raw pre/post hidden activations for the given layers:
    ``{layer: (pre, post)}`` with one row per token observation."""
    store = {int(l): ([], []) for l in layers}

    def sink(i):
        return lambda pre, post: (store[i][0].append(pre), store[i][1].append(post))

    x = dataset.x if isinstance(dataset, Dataset) else np.asarray(dataset)
    for s in range(0, x.shape[0], batch_size):
        run(spec, weights, x[s: s + batch_size], taps={i: sink(i) for i in store})
    return {i: (np.concatenate(a), np.concatenate(b)) for i, (a, b) in store.items()}


HIST_HEADER = ["layer", "neuron", "stage", "bin", "lo", "hi", "count"]


def export_histograms(recorded: dict, selection, bins: int = 30, value_range="auto") -> list:
    """Histogram rows for each selected ``(layer, neuron)``.

    Pre- and post-nonlinearity histograms of one neuron share bin edges:
    ``value_range="auto"`` spans both value sets, a ``(lo, hi)`` pair fixes it.
    """
    selection = [(int(l), int(n)) for l, n in selection]
    if not selection:
        raise UsageError("empty neuron selection")
    if bins < 1:
        raise UsageError("bins must be >= 1")
    rows = []
    for layer, neuron in selection:
        if layer not in recorded:
            raise UsageError(f"layer {layer} was not recorded")
        pre, post = recorded[layer]
        if not 0 <= neuron < pre.shape[1]:
            raise UsageError(f"neuron {neuron} out of range for layer {layer}")
        a, b = pre[:, neuron], post[:, neuron]
        if value_range == "auto":
            lo, hi = float(min(a.min(), b.min())), float(max(a.max(), b.max()))
        else:
            lo, hi = (float(v) for v in value_range)
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)
        for stage, vals in (("pre", a), ("post", b)):
            counts, _ = np.histogram(np.clip(vals, lo, hi), bins=edges)
            for k in range(bins):
                rows.append([layer, neuron, stage, k, edges[k], edges[k + 1], int(counts[k])])
    return rows
