"""``vbp`` command line: one subcommand per pipeline stage.

Exit codes: 1 usage, 2 format, 3 integrity (broken fingerprint chain),
4 numeric (NaN encountered).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation, bench, io, plots
from .compensate import apply_plan
from .data import generate, load_dataset, save_dataset
from .errors import IntegrityError, UsageError, VBPError
from .model import (PRESETS, count_macs, count_params, init_weights, load_model, preset, save_model,
                    uniform_spec)
from .prune import SUMMARY_HEADER, PruningPlan, make_plan, plan_summary
from .stats import HIST_HEADER, StatsReport, collect_both, export_histograms, record_activations
from .train import LOG_HEADER, REFERENCE_LR, FinetuneConfig, evaluate, finetune, retention

log = logging.getLogger("vbp")

EVAL_HEADER = ["label", "macs", "params", "top1", "loss", "retention"]
REPORT_HEADER = ["model", "macs", "params", "retention", "final"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(header, rows, args, figure=None):
    text = io.format_table(header, rows, getattr(args, "format", "csv"))
    out = getattr(args, "out", None)
    if out:
        io.atomic_write_text(out, text)
    else:
        sys.stdout.write(text)
    fig_path = getattr(args, "figure", None)
    if figure is not None and fig_path:
        figure(rows, fig_path)


def _load_stats_for(model_path, stats_path) -> StatsReport:
    report = StatsReport.load(stats_path)
    fp = io.file_fingerprint(model_path)
    if report.model_fingerprint != fp:
        raise IntegrityError(f"{stats_path} was collected on model {report.model_fingerprint}, "
                             f"but {model_path} has fingerprint {fp}")
    return report


def _rates(text: str) -> list:
    try:
        return [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"cannot parse rates {text!r}") from None


# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    ds = generate(args.samples, args.tokens, args.dim, args.classes, args.seed, args.separation,
                  args.symmetric)
    save_dataset(ds, args.out)
    print(f"{args.out}: {len(ds)} samples, fingerprint {io.file_fingerprint(args.out)}")


def cmd_init(args):
    manual = {k: getattr(args, k) for k in ("blocks", "dim", "hid", "heads", "tokens", "classes", "patch_in")}
    given = [k for k, v in manual.items() if v is not None]
    if args.preset and given:
        raise UsageError(f"--preset conflicts with manual shape flags: {', '.join(given)}")
    if args.preset:
        spec = preset(args.preset)
    else:
        missing = [k for k in ("blocks", "dim", "hid", "heads", "tokens", "classes") if manual[k] is None]
        if missing:
            raise UsageError(f"without --preset, these flags are required: {', '.join(missing)}")
        spec = uniform_spec(args.blocks, args.dim, args.hid, args.heads, args.tokens, args.classes,
                            args.patch_in)
    weights = init_weights(spec, args.seed, shape_only=args.shape_only, std=args.init_std)
    fp = save_model(spec, weights, args.out)
    print(f"{args.out}: params {count_params(spec)} macs {count_macs(spec)} fingerprint {fp}")


def cmd_stats(args):
    spec, weights = load_model(args.model)
    data = load_dataset(args.data)
    if args.max_samples:
        data = data.subset(np.arange(min(args.max_samples, len(data))))
    reports = collect_both(spec, weights, data, args.batch_size)
    report = reports[args.tap]
    fp = report.save(args.out)
    print(f"{args.out}: tap {args.tap}, {report.layers[0].count} observations/layer, fingerprint {fp}")
    if args.variance_out:
        rows = bench.export_variance_distribution(report)
        io.atomic_write_text(args.variance_out, io.format_table(bench.VARIANCE_HEADER, rows, args.format))
        if args.figure:
            plots.plot_variance_distribution(rows, args.figure)
    if args.hist_out:
        selection = [tuple(int(v) for v in item.split(":")) for item in args.hist_neurons.split(",") if item]
        if not selection:
            raise UsageError("--hist-out needs --hist-neurons LAYER:NEURON[,...]")
        recorded = record_activations(spec, weights, data, {l for l, _ in selection}, args.batch_size)
        rows = export_histograms(recorded, selection, args.bins)
        io.atomic_write_text(args.hist_out, io.format_table(HIST_HEADER, rows, args.format))
        if args.hist_figure:
            plots.plot_histograms(rows, args.hist_figure)


def cmd_prune(args):
    spec, weights = load_model(args.model)
    model_fp = io.file_fingerprint(args.model)
    stats = _load_stats_for(args.model, args.stats) if args.stats else None
    comp = _load_stats_for(args.model, args.comp_stats) if args.comp_stats else stats
    if args.plan:
        plan = PruningPlan.load(args.plan)
        if plan.model_fingerprint and plan.model_fingerprint != model_fp:
            raise IntegrityError(f"{args.plan} targets model {plan.model_fingerprint}, "
                                 f"but {args.model} has fingerprint {model_fp}")
        if stats is not None and plan.stats_fingerprint and plan.tap == stats.tap \
                and plan.stats_fingerprint != io.file_fingerprint(args.stats):
            raise IntegrityError(f"{args.plan} was built from statistics {plan.stats_fingerprint}, "
                                 f"but {args.stats} has fingerprint {io.file_fingerprint(args.stats)}")
    else:
        if args.rate is None:
            raise UsageError("--rate is required unless --plan is given")
        data = load_dataset(args.data) if args.data else None
        plan = make_plan(spec, weights, args.rate, args.criterion, report=stats, dataset=data,
                         min_keep=args.min_keep, seed=args.seed, snip_batches=args.snip_batches)
    if args.plan_out:
        plan.save(args.plan_out)
    summary = plan_summary(plan, spec)
    if args.summary_out:
        io.atomic_write_text(args.summary_out, io.format_table(SUMMARY_HEADER, summary, args.format))
    if args.figure:
        plots.plot_plan_summary(summary, args.figure)
    if args.out:
        new_spec, new_weights, record = apply_plan(spec, weights, plan, comp if args.mode == "shift" else None,
                                                   args.mode)
        fp = save_model(new_spec, new_weights, args.out)
        record.save(args.record_out or str(args.out) + ".comp.json")
        print(f"{args.out}: pruned {plan.total} neurons, params {count_params(new_spec)} "
              f"macs {count_macs(new_spec)} fingerprint {fp}")


def cmd_eval(args):
    spec, weights = load_model(args.model)
    data = load_dataset(args.data)
    res = evaluate(spec, weights, data)
    ret = ""
    if args.dense:
        d_spec, d_weights = load_model(args.dense)
        ret = retention(res["top1"], evaluate(d_spec, d_weights, data)["top1"])
    label = args.label or Path(args.model).stem
    _emit(EVAL_HEADER, [[label, count_macs(spec), count_params(spec), res["top1"], res["loss"], ret]], args)


def cmd_finetune(args):
    spec, weights = load_model(args.model)
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    teacher = load_model(args.teacher) if args.teacher else None
    cfg = FinetuneConfig(epochs=args.epochs, lr=REFERENCE_LR if args.reference_lr else args.lr,
                         weight_decay=args.wd, batch_size=args.batch_size, kd=not args.no_kd,
                         alpha=args.alpha, temperature=args.temperature, seed=args.seed)
    if cfg.kd and teacher is None:
        log.warning("no --teacher given; fine-tuning with cross-entropy only")
    new_weights, rows = finetune(spec, weights, data, cfg, teacher=teacher, val=val)
    fp = save_model(spec, new_weights, args.out)
    if args.log:
        io.atomic_write_text(args.log, io.format_table(LOG_HEADER, rows, args.format))
    if args.figure:
        plots.plot_training_log(rows, args.figure)
    print(f"{args.out}: best val top1 {max(r[3] for r in rows):.4f}, fingerprint {fp}")


def cmd_bench(args):
    rows = []
    dense = None
    for path in [args.model] + ([args.pruned] if args.pruned else []):
        spec, weights = load_model(path)
        res = bench.bench_latency(spec, weights, args.batch_size, args.warmup, args.runs, args.threads, args.seed)
        dense = dense or res
        rows.append([path, args.batch_size, res["threads"], res["median_ms"], res["p10_ms"], res["p90_ms"],
                     bench.speedup(dense, res)])
    _emit(bench.LATENCY_HEADER, rows, args)


def cmd_sweep(args):
    spec, weights = load_model(args.model)
    stats = _load_stats_for(args.model, args.stats) if args.stats else None
    comp = _load_stats_for(args.model, args.comp_stats) if args.comp_stats else None
    data = load_dataset(args.data)
    train = load_dataset(args.train_data) if args.train_data else None
    cfg = None
    if args.finetune_epochs:
        cfg = FinetuneConfig(epochs=args.finetune_epochs, lr=args.lr, seed=args.seed)
    rows = bench.sweep(spec, weights, stats, _rates(args.rates), data, args.criterion, args.mode,
                       cfg, train, comp_stats=comp, seed=args.seed, min_keep=args.min_keep)
    _emit(bench.SWEEP_HEADER, [[*r[:4], "" if r[4] is None else r[4]] for r in rows], args, plots.plot_sweep)


def cmd_ablate(args):
    setup = ablation.ToySetup(samples=args.samples, separation=args.separation, epochs=args.train_epochs,
                              symmetric=not args.no_symmetric)
    data = load_dataset(args.data) if args.data else None
    seeds = range(args.seed, args.seed + args.seeds)
    rows, _ = ablation.ablate(seeds, args.rate, setup, args.finetune_epochs, data)
    _emit(ablation.HEADER, rows, args, plots.plot_ablation)


def cmd_report(args):
    rows = []
    for path in args.inputs:
        header, body = io.read_table(path)
        if header == EVAL_HEADER:
            for label, macs, params, top1, _, ret in body:
                rows.append([label, int(macs), int(params), ret or "-", top1 if not ret else "-"])
        elif header == LOG_HEADER:
            if not rows:
                raise UsageError(f"{path}: an epoch log must follow the eval table it belongs to")
            rows[-1][4] = format(max(float(r[3]) for r in body), ".10g")
        elif header == bench.SWEEP_HEADER:
            for rate, macs, params, ret, final in body:
                rows.append([f"rate={rate}", int(macs), int(params), ret, final or "-"])
        else:
            raise UsageError(f"{path}: unrecognised table header {header}")
    _emit(REPORT_HEADER, rows, args, plots.plot_report)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vbp", description="Variance-based structured pruning of MLP blocks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fmt(sp, figure=True):
        sp.add_argument("--format", choices=["csv", "tsv"], default="csv")
        if figure:
            sp.add_argument("--figure", help="also render a PNG figure here")

    s = sub.add_parser("gen-data", help="write a synthetic VBPD dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, default=1024)
    s.add_argument("--tokens", type=int, default=9)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--separation", type=float, default=3.0)
    s.add_argument("--symmetric", action="store_true", help="random template sign per sample")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("init", help="write a randomly initialised VBPM model")
    s.add_argument("--preset", choices=sorted(PRESETS))
    for flag in ("blocks", "dim", "hid", "heads", "tokens", "classes"):
        s.add_argument(f"--{flag}", type=int)
    s.add_argument("--patch-in", type=int, help="in_features of a linear patch embedding")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--init-std", type=float, default=0.02)
    s.add_argument("--shape-only", action="store_true", help="all-zero weights for accounting")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("stats", help="collect per-neuron activation statistics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--tap", choices=["pre", "post"], default="post")
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--max-samples", type=int)
    s.add_argument("--variance-out", help="CSV of sorted variances with cumulative share")
    s.add_argument("--hist-out", help="CSV of pre/post activation histograms")
    s.add_argument("--hist-neurons", default="", help="LAYER:NEURON[,LAYER:NEURON...]")
    s.add_argument("--bins", type=int, default=30)
    s.add_argument("--hist-figure")
    fmt(s)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("prune", help="select neurons and write the compacted model")
    s.add_argument("--model", required=True)
    s.add_argument("--stats")
    s.add_argument("--comp-stats", help="post-activation statistics for compensation, when --stats is pre")
    s.add_argument("--plan", help="apply an existing plan instead of selecting")
    s.add_argument("--rate", type=float)
    s.add_argument("--criterion", choices=["variance", "magnitude", "snip", "random"], default="variance")
    s.add_argument("--mode", choices=["shift", "no-shift"], default="shift")
    s.add_argument("--min-keep", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", help="labeled data for the snip criterion")
    s.add_argument("--snip-batches", type=int, default=1)
    s.add_argument("--plan-out")
    s.add_argument("--out", help="pruned VBPM model")
    s.add_argument("--record-out", help="compensation record (default: OUT.comp.json)")
    s.add_argument("--summary-out", help="per-layer pruning summary CSV")
    fmt(s)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("eval", help="top-1 accuracy and loss")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--dense", help="unpruned model, to report retention")
    s.add_argument("--label")
    s.add_argument("--out")
    fmt(s, figure=False)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("finetune", help="AdamW fine-tuning with optional distillation")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val")
    s.add_argument("--teacher")
    s.add_argument("--no-kd", action="store_true")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--reference-lr", action="store_true", help=f"use lr {REFERENCE_LR}")
    s.add_argument("--wd", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--temperature", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="epoch log CSV")
    fmt(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("bench", help="forward-pass latency and speed-up")
    s.add_argument("--model", required=True)
    s.add_argument("--pruned")
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--runs", type=int, default=20)
    s.add_argument("--threads", type=int, help="default: $VBP_THREADS or 1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    fmt(s, figure=False)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="retention across pruning rates from one stats file")
    s.add_argument("--model", required=True)
    s.add_argument("--stats")
    s.add_argument("--comp-stats")
    s.add_argument("--data", required=True, help="evaluation data")
    s.add_argument("--train-data", help="fine-tuning data")
    s.add_argument("--rates", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7")
    s.add_argument("--criterion", choices=["variance", "magnitude", "snip", "random"], default="variance")
    s.add_argument("--mode", choices=["shift", "no-shift"], default="shift")
    s.add_argument("--min-keep", type=int, default=1)
    s.add_argument("--finetune-epochs", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    fmt(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ablate", help="criterion x compensation x tap grid over seeds")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--rate", type=float, default=0.5)
    s.add_argument("--data", help="use this dataset for every seed instead of generating one")
    s.add_argument("--samples", type=int, default=ablation.ToySetup.samples)
    s.add_argument("--separation", type=float, default=ablation.ToySetup.separation)
    s.add_argument("--no-symmetric", action="store_true")
    s.add_argument("--train-epochs", type=int, default=ablation.ToySetup.epochs)
    s.add_argument("--finetune-epochs", type=int, default=0)
    s.add_argument("--out")
    fmt(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="join eval tables, epoch logs and sweeps")
    s.add_argument("inputs", nargs="+", help="eval CSVs, each optionally followed by its epoch log; sweep CSVs")
    s.add_argument("--out")
    fmt(s)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except VBPError as exc:
        print(f"vbp: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"vbp: error: {exc}", file=sys.stderr)
        return UsageError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
