"""Command-line entry point.

Exit codes: 0 ok, 1 merge-bn equivalence check failed, 2 usage/config/input
error, 3 training diverged, 4 structural error (grouped layer without BN).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiments import QL_BENCH_HEADER, TABLE1_HEADER, build_run, ql_bench, requantize
from .grouping import FoldError, group_optimal_alphas, partition_filters
from .io import FormatError, atomic_write_text
from .nn import WeightLayer
from .quant import optimal_alpha
from .reshape import ClipConfig, excess_kurtosis
from .train import (DivergenceError, Phase, evaluate, finalize_for_inference, finetune_lowbit, load_run,
                    max_relative_discrepancy, pretrain_float, save_run, start_finetune, train_epoch)

log = logging.getLogger("gdrq")

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_DIVERGED, EXIT_STRUCTURE = 0, 1, 2, 3, 4
METRICS_HEADER = ("epoch", "loss", "acc", "layer", "ql", "kurtosis")
INSPECT_SCHEMA = 1
FOLD_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


def parse_bits(text: str) -> list[int]:
    """'4', '2..8' or '2,4,8'."""
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split(".."))
            bits = list(range(lo, hi + 1))
        else:
            bits = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}") from None
    if not bits or any(not 1 <= b <= 8 for b in bits):
        raise argparse.ArgumentTypeError(f"bits must lie in 1..8, got {text!r}")
    return bits


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _write_out(path, text: str) -> None:
    try:
        atomic_write_text(path, text)
    except OSError as e:
        raise UsageError(f"cannot write {path}: {e}") from None


def metrics_rows(history):
    for i, row in enumerate(history, start=1):
        for name, m in row["layers"].items():
            yield (i, row["loss"], row["acc"], name, m["ql"], m["kurtosis"])


# ---- commands ---------------------------------------------------------------

def cmd_ql_bench(args) -> int:
    rows = ql_bench(args.bits, args.count, args.seed)
    text = csv_text(QL_BENCH_HEADER, rows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        _write_out(args.out, text)
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(dump_config(ExperimentConfig()))
    return EXIT_OK


def _dataset(cfg: ExperimentConfig):
    from .train import generate_toy_dataset
    return generate_toy_dataset(cfg.dataset)


def _run_phases(cfg: ExperimentConfig, out: Path, resume: bool) -> dict:
    ckpt = out / "checkpoint"
    data = _dataset(cfg)
    if resume and ckpt.exists():
        run, manifest = load_run(ckpt, data)
        summary = manifest.get("extra", {})
        log.info("resumed %s at %s epoch %d", ckpt, run.phase.value, run.epoch)
    elif "pretrain" in cfg.phases:
        run = build_run(data, widths=cfg.model.widths, bits_w=cfg.bits_w, bits_a=cfg.bits_a, gs=cfg.gs,
                        alpha_source=cfg.alpha_source,
                        clip=ClipConfig(cfg.clip.k_w, cfg.clip.k_a, cfg.clip.lam),
                        skip_first_layer=cfg.skip_first_layer, schedule=cfg.pretrain, seed=cfg.seed)
        summary = {}
    else:
        base, _ = load_run(cfg.init_checkpoint)
        run = requantize(base, bits_w=cfg.bits_w, bits_a=cfg.bits_a, gs=cfg.gs,
                         alpha_source=cfg.alpha_source, skip_first_layer=cfg.skip_first_layer,
                         schedule=cfg.finetune)
        run.data = data
        summary = {}

    def checkpoint():
        save_run(run, ckpt, extra=summary)
        _write_out(out / "metrics.csv", csv_text(METRICS_HEADER, metrics_rows(run.history)))

    if run.phase is Phase.FLOAT_PRETRAIN:
        run.graph.set_quant_enabled(False)
        while run.epoch < run.schedule.epochs:
            train_epoch(run)
            checkpoint()
        summary["float_acc"] = evaluate(run.graph, data.x_test, data.y_test)[1]
        if "finetune" in cfg.phases:
            start_finetune(run, cfg.finetune)
            summary["before_acc"] = evaluate(run.graph, data.x_test, data.y_test)[1]
        checkpoint()
    if run.phase is Phase.LOWBIT_FINETUNE and "finetune" in cfg.phases:
        run.graph.set_quant_enabled(True)
        if "before_acc" not in summary:
            summary["before_acc"] = evaluate(run.graph, data.x_test, data.y_test)[1]
        while run.epoch < run.schedule.epochs:
            train_epoch(run)
            checkpoint()
        summary["after_acc"] = evaluate(run.graph, data.x_test, data.y_test)[1]
        checkpoint()
    return summary


def _run_grid(cfg: ExperimentConfig, out: Path, resume: bool) -> list[tuple]:
    float_cfg_phases = ("pretrain",)
    from dataclasses import replace
    summary = _run_phases(replace(cfg, phases=float_cfg_phases), out / "pretrain", resume)
    base, _ = load_run(out / "pretrain" / "checkpoint")
    rows = []
    for bits in cfg.grid.bits_w:
        for gs in cfg.grid.gs:
            run = requantize(base, bits_w=bits, bits_a=cfg.bits_a, gs=gs, alpha_source=cfg.alpha_source,
                             skip_first_layer=cfg.skip_first_layer, schedule=cfg.finetune)
            _, before, after = finetune_lowbit(run)
            rows.append((cfg.seed, bits, gs, summary["float_acc"], before, after))
            log.info("bits_w=%d gs=%d before %.2f after %.2f", bits, gs, before, after)
            save_run(run, out / f"w{bits}_gs{gs}" / "checkpoint", extra=dict(zip(TABLE1_HEADER, rows[-1])))
    _write_out(out / "table1.csv", csv_text(TABLE1_HEADER, rows))
    return rows


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_out(out / "config.json", dump_config(cfg))
    try:
        if cfg.grid is not None:
            _run_grid(cfg, out, args.resume)
        else:
            summary = _run_phases(cfg, out, args.resume)
            _write_out(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    except DivergenceError as e:
        print(f"diverged: {e}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    except FoldError as e:
        print(f"structural error: {e}", file=sys.stderr)
        return EXIT_STRUCTURE
    return EXIT_OK


def cmd_merge_bn(args) -> int:
    try:
        run, manifest = load_run(args.checkpoint)
    except (FormatError, OSError) as e:
        print(f"cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FoldError as e:
        print(f"structural error: {e}", file=sys.stderr)
        return EXIT_STRUCTURE
    try:
        folded = finalize_for_inference(run.graph)
    except FoldError as e:
        print(f"structural error: {e}", file=sys.stderr)
        return EXIT_STRUCTURE
    rng = np.random.default_rng(args.seed)
    x = run.data.x_test[rng.permutation(len(run.data.x_test))[:args.batch]]
    ref = run.graph.forward(x, train=False)
    got = folded.forward(x, train=False)
    disc = max_relative_discrepancy(got, ref)
    run.graph = folded
    save_run(run, args.out, extra={**manifest.get("extra", {}), "fold_discrepancy": disc})
    print(json.dumps({"max_relative_discrepancy": disc, "folded": folded.folded}))
    return EXIT_OK if disc <= FOLD_TOLERANCE else EXIT_MISMATCH


def inspect_layer(layer: WeightLayer, bits: int, gs: int) -> dict:
    w = layer.params["weight"]
    scheme = partition_filters(layer.n_filters, gs)
    scheme = group_optimal_alphas(w, scheme, bits)
    counts, edges = np.histogram(w, bins=64)
    return {
        "schema": INSPECT_SCHEMA,
        "layer": layer.name,
        "shape": list(w.shape),
        "bits": bits,
        "group_size": gs,
        "groups": [{"start": a, "end": b, "alpha": al} for (a, b), al in zip(scheme.boundaries, scheme.alphas)],
        "alpha_star": optimal_alpha(w, bits).alpha_star,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        "excess_kurtosis": excess_kurtosis(w),
        "ql": {str(b): optimal_alpha(w, b).ql for b in range(2, 9)},
    }


def cmd_inspect(args) -> int:
    try:
        run, _ = load_run(args.checkpoint)
    except (FormatError, OSError) as e:
        print(f"cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_USAGE
    layers = {l.name: l for l in run.graph.weight_layers()}
    if args.layer not in layers:
        print(f"unknown layer {args.layer!r}; available: {', '.join(layers)}", file=sys.stderr)
        return EXIT_USAGE
    layer = layers[args.layer]
    gs = args.gs if args.gs is not None else (layer.site.scheme.group_size if layer.site else -1)
    bits = args.bits or run.bits_w or 2
    report = inspect_layer(layer, bits, gs)
    text = json.dumps(report, indent=2)
    if args.out:
        _write_out(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdrq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("ql-bench", help="quantized-loss of Laplace/Gaussian/uniform samples")
    q.add_argument("--bits", type=parse_bits, default=parse_bits("2..8"))
    q.add_argument("--count", type=int, default=1000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="-")
    q.set_defaults(func=cmd_ql_bench)

    t = sub.add_parser("train", help="float pretraining and/or low-bit finetuning from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge-bn", help="fold group scales into batch norm")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--batch", type=int, default=256)
    m.set_defaults(func=cmd_merge_bn)

    i = sub.add_parser("inspect", help="per-group alphas, histogram, kurtosis and QL of one layer")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--layer", required=True)
    i.add_argument("--bits", type=int)
    i.add_argument("--gs", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("defaults", help="print the default experiment config")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
