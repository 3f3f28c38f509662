"""Variance-based structured pruning of transformer MLP blocks.

Activation variance is accumulated per hidden neuron, the lowest-variance
neurons are removed globally, and their mean contribution is folded into the
next layer's bias so the pruned model needs no retraining to stay close.
"""
from .compensate import CompensationRecord, apply_plan, mean_replacement_forward
from .data import Dataset, generate, load_dataset, save_dataset
from .errors import VBPError
from .model import (ModelSpec, count_macs, count_params, forward_model, init_weights,
                    load_model, preset, save_model, uniform_spec)
from .prune import PruningPlan, global_select, make_plan
from .stats import StatsReport, WelfordAccumulator, collect, collect_both
from .train import FinetuneConfig, evaluate, finetune

__version__ = "0.1.0"

__all__ = [
    "CompensationRecord", "Dataset", "FinetuneConfig", "ModelSpec", "PruningPlan",
    "StatsReport", "VBPError", "WelfordAccumulator", "apply_plan", "collect",
    "collect_both", "count_macs", "count_params", "evaluate", "finetune",
    "forward_model", "generate", "global_select", "init_weights", "load_dataset",
    "load_model", "make_plan", "mean_replacement_forward", "preset", "save_dataset",
    "save_model", "uniform_spec",
]
