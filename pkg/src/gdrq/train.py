"""Float pretraining with Scale-Clip, low-bit finetuning, and inference folding."""

from __future__ import annotations

import copy
import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grouping import LAYER_WISE, FoldError, GroupScheme, fold_groups_into_bn
from .io import FormatError, load_checkpoint_dir, save_checkpoint_dir
from .nn import LayerGraph, graph_config, graph_from_config, softmax_cross_entropy
from .quant import NonFiniteError, RangeMode, optimal_alpha
from .reshape import ClipConfig, clip_weights, excess_kurtosis, weight_threshold

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class Phase(str, enum.Enum):
    FLOAT_PRETRAIN = "float_pretrain"
    LOWBIT_FINETUNE = "lowbit_finetune"


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 10
    channels: int = 1
    size: int = 12
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 2.0
    shift: int = 1
    seed: int = 0


@dataclass
class ToyDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    templates: np.ndarray
    spec: DatasetSpec
    x_train_clean: np.ndarray | None = None

    def train_inputs(self, rng: np.random.Generator | None) -> np.ndarray:
        """Training inputs; with an rng, the noise is redrawn (per-epoch augmentation)."""
        if rng is None or self.x_train_clean is None:
            return self.x_train
        return self.x_train_clean + self.spec.noise * rng.standard_normal(self.x_train_clean.shape)


def _blur(img: np.ndarray) -> np.ndarray:
    # two passes of a wrap-around 3x3 box filter
    for _ in range(2):
        img = sum(np.roll(np.roll(img, dy, -2), dx, -1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9.0
    return img


def generate_toy_dataset(spec: DatasetSpec = DatasetSpec()) -> ToyDataset:
    """Class templates (smoothed noise) under random shifts, contrast, and Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    t = _blur(rng.standard_normal((spec.classes, spec.channels, spec.size, spec.size)))
    t = (t - t.mean(axis=(1, 2, 3), keepdims=True)) / t.std(axis=(1, 2, 3), keepdims=True)

    def draw(n):
        y = rng.permutation(np.arange(n) % spec.classes)
        x = t[y].copy()
        shifts = rng.integers(-spec.shift, spec.shift + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (dy, dx), axis=(-2, -1))
        x *= rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
        return x + spec.noise * rng.standard_normal(x.shape), y, x

    x_tr, y_tr, clean = draw(spec.n_train)
    x_te, y_te, _ = draw(spec.n_test)
    return ToyDataset(x_tr, y_tr, x_te, y_te, t, spec, clean)


@dataclass(frozen=True)
class Schedule:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    decay_at: float = 2 / 3

    def lr_at(self, epoch: int) -> float:
        return self.lr * (0.1 if epoch >= round(self.decay_at * self.epochs) else 1.0)


@dataclass
class TrainRun:
    graph: LayerGraph
    data: ToyDataset
    clip: ClipConfig
    schedule: Schedule
    phase: Phase = Phase.FLOAT_PRETRAIN
    seed: int = 0
    epoch: int = 0
    bits_w: int | None = 2
    bits_a: int | None = 4
    reshape: bool = True
    augment: bool = True
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def project_weights(graph: LayerGraph, k_w: float) -> None:
    """Clip every group of every weight layer at ``k_w * mean|G_l|``."""
    if math.isinf(k_w):
        return
    for l in graph.weight_layers():
        w = l.params["weight"]
        scheme = l.site.scheme if l.site is not None else None
        bounds = scheme.boundaries if scheme is not None else [(0, w.shape[0])]
        for a, b in bounds:
            w[a:b] = clip_weights(w[a:b], weight_threshold(w[a:b], k_w))


def sgd_step(run: TrainRun, lr: float) -> None:
    s = run.schedule
    for key, layer, name in run.graph.named_params():
        p = layer.params[name]
        g = layer.grads[name]
        if name == "weight" and s.weight_decay:
            g = g + s.weight_decay * p
        v = run.velocity.get(key)
        v = g if v is None else s.momentum * v + g
        run.velocity[key] = v
        layer.params[name] = p - lr * v


def evaluate(graph: LayerGraph, x: np.ndarray, y: np.ndarray, batch: int = 500) -> tuple[float, float]:
    """(mean loss, accuracy in percent) in eval mode."""
    losses, correct = 0.0, 0
    for i in range(0, len(x), batch):
        logits = graph.forward(x[i:i + batch], train=False)
        loss, _ = softmax_cross_entropy(logits, y[i:i + batch])
        losses += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[i:i + batch]).sum())
    return losses / len(x), 100.0 * correct / len(x)


def layer_metrics(graph: LayerGraph, bits: int) -> dict[str, dict[str, float]]:
    """Per weight layer: layer-wise optimal QL at ``bits`` and excess kurtosis."""
    out = {}
    for l in graph.weight_layers():
        w = l.params["weight"]
        out[l.name] = {"ql": optimal_alpha(w, bits, RangeMode.SYMMETRIC).ql, "kurtosis": excess_kurtosis(w)}
    return out


def _refresh_searched_alphas(graph: LayerGraph) -> None:
    for l in graph.weight_layers():
        if l.site is not None and l.site.quantizes_weights and l.site.alpha_source == "ql_search":
            l.site.refresh_alphas(l.params["weight"])


def train_epoch(run: TrainRun) -> dict:
    """One pass over the training split; returns the epoch's metrics row."""
    g, s, d = run.graph, run.schedule, run.data
    phase_idx = 0 if run.phase is Phase.FLOAT_PRETRAIN else 1
    rng = np.random.default_rng([run.seed, phase_idx, run.epoch])
    order = rng.permutation(len(d.x_train))
    x_train = d.train_inputs(rng if run.augment else None)
    lr = s.lr_at(run.epoch)
    _refresh_searched_alphas(g)
    total, count = 0.0, 0
    for i in range(0, len(order), s.batch_size):
        idx = order[i:i + s.batch_size]
        try:
            logits = g.forward(x_train[idx], train=True)
        except NonFiniteError as e:
            raise DivergenceError(f"epoch {run.epoch}: {e}") from None
        loss, grad = softmax_cross_entropy(logits, d.y_train[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} in epoch {run.epoch}")
        g.backward(grad)
        sgd_step(run, lr)
        if run.reshape:
            project_weights(g, run.clip.k_w)
        total += loss * len(idx)
        count += len(idx)
    run.epoch += 1
    _, acc = evaluate(g, d.x_test, d.y_test)
    row = {"phase": run.phase.value, "epoch": run.epoch, "loss": total / count, "acc": acc,
           "layers": layer_metrics(g, run.bits_w or 2)}
    run.history.append(row)
    log.info("%s epoch %d loss %.4f acc %.2f", run.phase.value, run.epoch, row["loss"], acc)
    return row


def pretrain_float(run: TrainRun, until: int | None = None) -> TrainRun:
    """Float training with Scale-Clip projection after every step; quantizers stay off."""
    if run.phase is not Phase.FLOAT_PRETRAIN:
        raise ValueError(f"pretrain_float needs phase {Phase.FLOAT_PRETRAIN.value}, got {run.phase.value}")
    run.graph.set_quant_enabled(False)
    until = run.schedule.epochs if until is None else until
    while run.epoch < until:
        train_epoch(run)
    return run


def start_finetune(run: TrainRun, schedule: Schedule | None = None) -> TrainRun:
    """Switch a pretrained run to low-bit finetuning (fresh optimizer state)."""
    run.phase = Phase.LOWBIT_FINETUNE
    run.epoch = 0
    run.velocity = {}
    if schedule is not None:
        run.schedule = schedule
    run.graph.set_quant_enabled(True)
    _refresh_searched_alphas(run.graph)
    return run


def finetune_lowbit(run: TrainRun, until: int | None = None) -> tuple[TrainRun, float, float]:
    """Finetune with quantized weights and activations.

    Returns the run plus the test accuracy before and after finetuning.
    """
    if run.phase is not Phase.LOWBIT_FINETUNE:
        raise ValueError(f"finetune_lowbit needs phase {Phase.LOWBIT_FINETUNE.value}, got {run.phase.value}")
    run.graph.set_quant_enabled(True)
    _refresh_searched_alphas(run.graph)
    before = evaluate(run.graph, run.data.x_test, run.data.y_test)[1]
    until = run.schedule.epochs if until is None else until
    while run.epoch < until:
        train_epoch(run)
    after = evaluate(run.graph, run.data.x_test, run.data.y_test)[1]
    return run, before, after


def finalize_for_inference(graph: LayerGraph) -> LayerGraph:
    """Folded, BN-frozen copy of a trained graph for deployment.

    Grouped layers are re-gridded onto their largest group alpha, with the
    per-group ratios moved into the following batch norm.
    """
    g = copy.deepcopy(graph)
    for l in g.layers:
        if hasattr(l, "frozen"):
            l.frozen = True
    for l in g.weight_layers():
        site = l.site
        if site is None or not site.quantizes_weights:
            continue
        if site.alpha_source == "scale_clip" or not site.scheme.alphas:
            site.refresh_alphas(l.params["weight"])
        if site.scheme.n_groups == 1:
            site.alpha_source = "fixed"
            continue
        bn = g.following_bn(l)
        if bn is None:
            raise FoldError(f"{l.name}: grouped layer has no following batch norm")
        bn_params = (bn.params["gamma"], bn.params["beta"], bn.buffers["running_mean"], bn.buffers["running_var"])
        plan, w = fold_groups_into_bn(l.params["weight"], site.scheme, site.w_bits, bn_params)
        l.params["weight"] = w
        bn.buffers["fold_scale"] = bn.buffers["fold_scale"] * plan.per_channel_scale
        site.scheme = GroupScheme(LAYER_WISE, [(0, l.n_filters)], [plan.reference_alpha])
        site.alpha_source = "fixed"
        g.folded = True
    return g


def max_relative_discrepancy(a: np.ndarray, b: np.ndarray) -> float:
    """max|a - b| relative to max|b|."""
    return float(np.abs(a - b).max() / max(float(np.abs(b).max()), 1e-30))


def save_run(run: TrainRun, path, extra: dict | None = None) -> None:
    """Checkpoint everything the next training step depends on."""
    manifest = {
        "architecture": graph_config(run.graph),
        "run": {
            "phase": run.phase.value, "epoch": run.epoch, "seed": run.seed,
            "bits_w": run.bits_w, "bits_a": run.bits_a, "reshape": run.reshape, "augment": run.augment,
            "clip": {"k_w": run.clip.k_w, "k_a": run.clip.k_a, "lambda": run.clip.lam},
            "schedule": dataclasses.asdict(run.schedule),
            "dataset": dataclasses.asdict(run.data.spec),
        },
        "optimizer": sorted(run.velocity),
        "history": run.history,
        "extra": extra or {},
    }
    tensors = dict(run.graph.state())
    tensors.update({f"opt.{k}": v for k, v in run.velocity.items()})
    save_checkpoint_dir(path, manifest, tensors)


def load_run(path, data: ToyDataset | None = None) -> tuple[TrainRun, dict]:
    """Rebuild a TrainRun from a checkpoint; returns (run, manifest)."""
    manifest, tensors = load_checkpoint_dir(path)
    try:
        r = manifest["run"]
        graph = graph_from_config(manifest["architecture"])
        graph.load_state(tensors)
        spec = DatasetSpec(**r["dataset"])
        if data is None or data.spec != spec:
            data = generate_toy_dataset(spec)
        c = r["clip"]
        run = TrainRun(graph=graph, data=data, clip=ClipConfig(c["k_w"], c["k_a"], c["lambda"]),
                       schedule=Schedule(**r["schedule"]), phase=Phase(r["phase"]), seed=r["seed"],
                       epoch=r["epoch"], bits_w=r["bits_w"], bits_a=r["bits_a"], reshape=r["reshape"],
                       augment=r["augment"],
                       velocity={k: tensors[f"opt.{k}"] for k in manifest["optimizer"]},
                       history=manifest["history"])
    except FoldError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed checkpoint ({e!r})") from None
    return run, manifest
