"""Desk-scale experiment drivers shared by the CLI, scripts, and acceptance tests."""

from __future__ import annotations

import copy
import math
from dataclasses import replace

import numpy as np

from .grouping import LAYER_WISE
from .nn import build_toy_cnn, configure_quant
from .quant import Distribution, optimal_alpha, sample_distribution, scale_for_mean_abs
from .reshape import ClipConfig, reshape_metrics
from .train import (DatasetSpec, Schedule, ToyDataset, TrainRun, evaluate, finetune_lowbit,
                    generate_toy_dataset, pretrain_float, start_finetune)

# matched E|x| for the three distributions; uniform then spans [-9.2, 9.2]
BENCH_MEAN_ABS = 4.6
QL_BENCH_HEADER = ("distribution", "bits", "alpha_star", "ql")
TABLE1_HEADER = ("seed", "bits_w", "gs", "float_acc", "before_acc", "after_acc")


def ql_bench(bits_list, count: int, seed: int) -> list[tuple[str, int, float, float]]:
    """(distribution, bits, alpha*, QL) for Laplace/Gaussian/uniform samples of equal mean|x|."""
    rows = []
    for kind in (Distribution.LAPLACE, Distribution.GAUSSIAN, Distribution.UNIFORM):
        x = sample_distribution(kind, scale_for_mean_abs(kind, BENCH_MEAN_ABS), count, seed)
        for bits in bits_list:
            r = optimal_alpha(x, bits)
            rows.append((kind.value, int(bits), r.alpha_star, r.ql))
    return rows


def build_run(data: ToyDataset, *, widths=(16, 32, 64), bits_w=2, bits_a=4, gs=LAYER_WISE,
              alpha_source="scale_clip", clip: ClipConfig = ClipConfig(), skip_first_layer=True,
              schedule: Schedule = Schedule(), seed=0, reshape=True) -> TrainRun:
    s = data.spec
    g = build_toy_cnn(s.channels, s.size, s.classes, widths, seed=seed)
    configure_quant(g, bits_w=bits_w, bits_a=bits_a, gs=gs, alpha_source=alpha_source, clip=clip,
                    skip_first_layer=skip_first_layer)
    return TrainRun(g, data, clip, schedule, seed=seed, bits_w=bits_w, bits_a=bits_a, reshape=reshape)


def requantize(run: TrainRun, *, bits_w, bits_a, gs, alpha_source, skip_first_layer=True,
               schedule: Schedule | None = None) -> TrainRun:
    """Copy of a pretrained run with new quantization sites (trackers carried over)."""
    g = copy.deepcopy(run.graph)
    trackers = [copy.deepcopy(l.site.tracker) if l.site else None for l in g.weight_layers()]
    configure_quant(g, bits_w=bits_w, bits_a=bits_a, gs=gs, alpha_source=alpha_source, clip=run.clip,
                    skip_first_layer=skip_first_layer)
    for l, t in zip(g.weight_layers(), trackers):
        if l.site.tracker is not None and t is not None:
            l.site.tracker = t
    new = replace(run, graph=g, bits_w=bits_w, bits_a=bits_a, velocity={}, history=list(run.history))
    return start_finetune(new, schedule)


def reshape_study(data: ToyDataset, k_values, seed: int, schedule: Schedule, bits_list=range(2, 9),
                  **kw) -> dict[float, dict]:
    """Float pretraining per Scale-Clip factor; per-layer kurtosis, accuracy, first-layer QL curve."""
    out = {}
    for k in k_values:
        run = build_run(data, clip=ClipConfig(k_w=k), schedule=schedule, seed=seed, **kw)
        pretrain_float(run)
        layers = run.graph.weight_layers()
        first = layers[0].params["weight"]
        out[k] = {
            "acc": evaluate(run.graph, data.x_test, data.y_test)[1],
            "kurtosis": {l.name: reshape_metrics(l.params["weight"])[0] for l in layers},
            "first_layer_ql": {b: optimal_alpha(first, b).ql for b in bits_list},
            "run": run,
        }
    return out


def group_size_grid(data: ToyDataset, *, gs_list=(1, 4, -1), bits_list=(2, 3), seed=0,
                    pretrain: Schedule = Schedule(), finetune: Schedule = Schedule(epochs=5, lr=0.01),
                    k_w=math.inf, alpha_source="ql_search", bits_a=4, skip_first_layer=False,
                    pretrained: TrainRun | None = None, progress=None) -> list[tuple]:
    """Finetune one float model at every (bits_w, gs); rows follow TABLE1_HEADER."""
    if pretrained is None:
        pretrained = build_run(data, clip=ClipConfig(k_w=k_w), schedule=pretrain, seed=seed,
                               skip_first_layer=skip_first_layer)
        pretrain_float(pretrained)
    float_acc = evaluate(pretrained.graph, data.x_test, data.y_test)[1]
    rows = []
    for bits in bits_list:
        for gs in gs_list:
            run = requantize(pretrained, bits_w=bits, bits_a=bits_a, gs=gs, alpha_source=alpha_source,
                             skip_first_layer=skip_first_layer, schedule=finetune)
            _, before, after = finetune_lowbit(run)
            rows.append((seed, bits, gs, float_acc, before, after))
            if progress:
                progress(rows[-1])
    return rows


def ordering_holds(accs_by_gs: dict[int, float], order=(1, 4, -1)) -> bool:
    vals = [accs_by_gs[g] for g in order]
    return all(a >= b for a, b in zip(vals, vals[1:]))


def default_dataset(seed: int = 0, **kw) -> ToyDataset:
    return generate_toy_dataset(replace(DatasetSpec(), seed=seed, **kw))


def summarize_grid(rows) -> dict:
    """Per (seed, bits) whether the gs ordering holds before and after finetuning."""
    out = {}
    for seed, bits in sorted({(r[0], r[1]) for r in rows}):
        sel = {r[2]: r for r in rows if r[0] == seed and r[1] == bits}
        out[(seed, bits)] = {
            "before": ordering_holds({g: r[4] for g, r in sel.items()}, tuple(sel)),
            "after": ordering_holds({g: r[5] for g, r in sel.items()}, tuple(sel)),
        }
    return out


__all__ = ["ql_bench", "build_run", "requantize", "reshape_study", "group_size_grid", "ordering_holds",
           "default_dataset", "summarize_grid"]
