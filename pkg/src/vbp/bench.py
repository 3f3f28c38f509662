"""Latency measurement, variance-distribution export and pruning-rate sweeps."""
from __future__ import annotations

import os
import time
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .compensate import apply_plan
from .errors import UsageError
from .model import ModelSpec, count_macs, count_params, run, validate_weights
from .prune import make_plan
from .stats import StatsReport
from .train import FinetuneConfig, evaluate, finetune, retention

LATENCY_HEADER = ["model", "batch_size", "threads", "median_ms", "p10_ms", "p90_ms", "speedup"]
VARIANCE_HEADER = ["layer", "neuron_rank", "variance", "cumulative_fraction"]
SWEEP_HEADER = ["rate", "macs", "params", "retention", "final"]


def default_threads() -> int:
    return max(1, int(os.environ.get("VBP_THREADS", "1")))


def bench_latency(spec: ModelSpec, weights: dict, batch_size: int = 8, warmup: int = 5,
                  runs: int = 20, threads: Optional[int] = None, seed: int = 0) -> dict:
    """Median and 10th/90th percentile wall time of one forward pass.

    The same random batch is reused for every pass and weights are cast to the
    compute precision once up front, so only the forward itself is timed.
    """
    if runs < 5:
        raise UsageError("runs must be >= 5")
    validate_weights(spec, weights)
    threads = default_threads() if threads is None else threads
    x = np.random.default_rng(seed).standard_normal((batch_size, *spec.input_shape)).astype(np.float32)
    params = {k: v.astype(np.float64) for k, v in weights.items()}
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            run(spec, params, x)
        for _ in range(runs):
            t0 = time.perf_counter()
            run(spec, params, x)
            times.append((time.perf_counter() - t0) * 1e3)
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    return {"median_ms": float(med), "p10_ms": float(p10), "p90_ms": float(p90), "threads": threads}


def speedup(dense: dict, pruned: dict) -> float:
    return dense["median_ms"] / pruned["median_ms"]


def export_variance_distribution(report: StatsReport) -> list:
    """Per layer: variances ascending with the running share of the layer's
    total variance. A layer with zero total variance gets a linear ramp."""
    rows = []
    for i, layer in enumerate(report.layers):
        v = np.sort(np.asarray(layer.variance, dtype=np.float64))
        total = v.sum()
        n = len(v)
        cum = np.cumsum(v) / total if total > 0 else np.arange(1, n + 1) / n
        if total > 0:
            cum[-1] = 1.0
        rows.extend([i, r + 1, v[r], cum[r]] for r in range(n))
    return rows


def prune_and_evaluate(spec, weights, rate, eval_data, dense_top1, criterion="variance",
                       mode="shift", select_stats=None, comp_stats=None, seed=0, min_keep=1,
                       finetune_config: Optional[FinetuneConfig] = None, train_data=None,
                       snip_data=None) -> dict:
    """One prune -> evaluate [-> fine-tune -> evaluate] run.

    ``select_stats`` drives the variance criterion; ``comp_stats`` (post
    activation) supplies the means for compensation and defaults to
    ``select_stats``.
    """
    comp_stats = select_stats if comp_stats is None else comp_stats
    plan = make_plan(spec, weights, rate, criterion, report=select_stats, dataset=snip_data,
                     min_keep=min_keep, seed=seed)
    p_spec, p_weights, _ = apply_plan(spec, weights, plan, comp_stats if mode == "shift" else None, mode)
    top1 = evaluate(p_spec, p_weights, eval_data)["top1"]
    out = {"plan": plan, "spec": p_spec, "weights": p_weights, "top1": top1,
           "retention": retention(top1, dense_top1), "final": None}
    if finetune_config is not None:
        if train_data is None:
            raise UsageError("fine-tuning in a sweep needs training data")
        ft_weights, log = finetune(p_spec, p_weights, train_data, finetune_config,
                                   teacher=(spec, weights), val=eval_data)
        out["final"] = evaluate(p_spec, ft_weights, eval_data)["top1"]
        out["log"] = log
    return out


def sweep(spec: ModelSpec, weights: dict, stats: StatsReport, rates, dataset, criterion="variance",
          mode="shift", finetune_config: Optional[FinetuneConfig] = None, train_data=None,
          comp_stats: Optional[StatsReport] = None, seed: int = 0, min_keep: int = 1) -> list:
    """Rows of ``SWEEP_HEADER``, one per rate, all pruned from the same
    statistics. ``final`` is the fine-tuned top-1 (None without fine-tuning)."""
    rates = [float(r) for r in rates]
    if any(not 0 < r < 1 for r in rates) or rates != sorted(rates):
        raise UsageError("rates must be ascending values in (0, 1)")
    dense_top1 = evaluate(spec, weights, dataset)["top1"]
    rows = []
    for r in rates:
        res = prune_and_evaluate(spec, weights, r, dataset, dense_top1, criterion, mode,
                                 select_stats=stats, comp_stats=comp_stats, seed=seed,
                                 min_keep=min_keep, finetune_config=finetune_config,
                                 train_data=train_data, snip_data=train_data or dataset)
        rows.append([r, count_macs(res["spec"]), count_params(res["spec"]), res["retention"], res["final"]])
    return rows
