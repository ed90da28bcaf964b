"""A small numpy network engine with manual backprop and fake-quant sites.

Parameters and activations are float64 arrays. Weight layers own an optional
``QuantSite`` that fake-quantizes the layer's weights per filter group and the
layer's (post-ReLU) input against a tracked clipping threshold. Gradients flow
through both quantizers with the clipped straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grouping import (LAYER_WISE, FoldError, GroupScheme, group_optimal_alphas,
                       group_quantize, group_scale_clip_alphas, partition_filters)
from .quant import NonFiniteError, RangeMode, quantize_codes, max_code
from .reshape import ActivationTracker, ClipConfig, update_activation_threshold

ALPHA_SOURCES = ("scale_clip", "ql_search", "fixed")


class ShapeError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


@dataclass
class QuantSite:
    """Quantization settings of one weight layer.

    ``enabled`` gates the quantizers (off during float pretraining); the
    activation clip at ``tracker.t_a`` applies whenever a tracker exists.
    """

    scheme: GroupScheme
    w_bits: int | None = None
    a_bits: int | None = None
    alpha_source: str = "scale_clip"
    clip: ClipConfig = field(default_factory=ClipConfig)
    tracker: ActivationTracker | None = None
    enabled: bool = False

    def __post_init__(self):
        if self.alpha_source not in ALPHA_SOURCES:
            raise ValueError(f"alpha_source must be one of {ALPHA_SOURCES}, got {self.alpha_source!r}")

    @property
    def quantizes_weights(self) -> bool:
        return self.enabled and self.w_bits is not None

    @property
    def quantizes_acts(self) -> bool:
        return self.enabled and self.a_bits is not None and self.tracker is not None

    def refresh_alphas(self, weights: np.ndarray) -> None:
        if self.alpha_source == "scale_clip":
            self.scheme = group_scale_clip_alphas(weights, self.scheme, self.clip.k_w)
        elif self.alpha_source == "ql_search":
            self.scheme = group_optimal_alphas(weights, self.scheme, self.w_bits)
        elif not self.scheme.alphas:
            raise GraphStateError("fixed alpha source with no stored alphas")

    def weight_forward(self, weights: np.ndarray):
        """Quantized weights and the STE pass-through mask."""
        if self.alpha_source == "scale_clip" or not self.scheme.alphas:
            self.refresh_alphas(weights)
        wq = group_quantize(weights, self.scheme, self.w_bits)
        shape = (-1,) + (1,) * (weights.ndim - 1)
        mask = np.abs(weights) <= self.scheme.channel_alphas().reshape(shape)
        return wq, mask

    def act_forward(self, x: np.ndarray, train: bool):
        """Clip (and, when enabled, quantize) a layer input; returns (value, mask)."""
        tr = self.tracker
        if tr is None:
            return x, None
        if train:
            update_activation_threshold(tr, x, self.clip.k_a, self.clip.lam)
        if not tr.initialized:
            return x, None
        mask = (x >= 0) & (x <= tr.t_a)
        if self.quantizes_acts:
            codes = quantize_codes(x, self.a_bits, RangeMode.NONNEGATIVE, tr.t_a)
            return codes * (tr.t_a / max_code(self.a_bits, RangeMode.NONNEGATIVE)), mask
        return np.clip(x, 0.0, tr.t_a), mask


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise GraphStateError(f"{self.name}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def config(self) -> dict:
        return {"kind": self.kind, "name": self.name}


class WeightLayer(Layer):
    site: QuantSite | None = None

    @property
    def n_filters(self) -> int:
        return self.params["weight"].shape[0]

    def _effective_inputs(self, x, train):
        a_mask = None
        if self.site is not None:
            x, a_mask = self.site.act_forward(x, train)
        w = self.params["weight"]
        w_mask = None
        if self.site is not None and self.site.quantizes_weights:
            w, w_mask = self.site.weight_forward(w)
        return x, a_mask, w, w_mask


class Conv2D(WeightLayer):
    kind = "conv"

    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, pad=1, bias=False, rng=None):
        super().__init__(name)
        self.in_ch, self.out_ch, self.kernel, self.stride, self.pad = in_ch, out_ch, kernel, stride, pad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel))
        if bias:
            self.params["bias"] = np.zeros(out_ch)

    def config(self):
        return {**super().config(), "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "pad": self.pad, "bias": "bias" in self.params}

    def _cols(self, x):
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, (n, ho, wo), xp.shape

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name}: expected (N, {self.in_ch}, H, W), got {x.shape}")
        x, a_mask, w, w_mask = self._effective_inputs(x, train)
        cols, (n, ho, wo), xp_shape = self._cols(x)
        out = cols @ w.reshape(self.out_ch, -1).T
        if "bias" in self.params:
            out = out + self.params["bias"]
        if train:
            self._cache = (cols, (n, ho, wo), xp_shape, w, a_mask, w_mask)
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dout):
        cols, (n, ho, wo), xp_shape, w, a_mask, w_mask = self._need_cache()
        k, s, p = self.kernel, self.stride, self.pad
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = (d2.T @ cols).reshape(w.shape)
        self.grads["weight"] = dw * w_mask if w_mask is not None else dw
        if "bias" in self.params:
            self.grads["bias"] = d2.sum(axis=0)
        dcols = (d2 @ w.reshape(self.out_ch, -1)).reshape(n, ho, wo, self.in_ch, k, k)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
        return dx * a_mask if a_mask is not None else dx


class Dense(WeightLayer):
    kind = "dense"

    def __init__(self, name, in_features, out_features, rng=None):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features))
        self.params["bias"] = np.zeros(out_features)

    def config(self):
        return {**super().config(), "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        x, a_mask, w, w_mask = self._effective_inputs(x, train)
        if train:
            self._cache = (x, w, a_mask, w_mask)
        return x @ w.T + self.params["bias"]

    def backward(self, dout):
        x, w, a_mask, w_mask = self._need_cache()
        dw = dout.T @ x
        self.grads["weight"] = dw * w_mask if w_mask is not None else dw
        self.grads["bias"] = dout.sum(axis=0)
        dx = dout @ w
        return dx * a_mask if a_mask is not None else dx


class BatchNorm(Layer):
    """Per-channel batch norm over axis 1.

    ``fold_scale`` multiplies the effective ``gamma / sigma``; it stays 1 until
    group scales are merged in for inference.
    """

    kind = "batchnorm"

    def __init__(self, name, channels, eps=1e-5, momentum=0.9):
        super().__init__(name)
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.buffers["fold_scale"] = np.ones(channels)
        self.frozen = False

    def config(self):
        return {**super().config(), "channels": self.channels, "eps": self.eps, "momentum": self.momentum,
                "frozen": self.frozen}

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def _axes(self, x):
        return (0,) + tuple(range(2, x.ndim))

    def affine(self):
        """Per-channel (scale, shift) of the running-statistics transform."""
        inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        g = self.params["gamma"]
        return g * inv * self.buffers["fold_scale"], self.params["beta"] - g * self.buffers["running_mean"] * inv

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        bs = self._bshape(x)
        if not train or self.frozen:
            scale, shift = self.affine()
            if train:
                self._cache = ("frozen", x)
            return x * scale.reshape(bs) + shift.reshape(bs)
        if not np.all(self.buffers["fold_scale"] == 1.0):
            raise GraphStateError(f"{self.name}: folded batch norm cannot be trained")
        axes = self._axes(x)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bs)) * inv.reshape(bs)
        m = self.momentum
        self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
        self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        self._cache = ("batch", xhat, inv.reshape(bs), axes)
        return self.params["gamma"].reshape(bs) * xhat + self.params["beta"].reshape(bs)

    def backward(self, dout):
        cache = self._need_cache()
        axes = self._axes(dout)
        bs = self._bshape(dout)
        if cache[0] == "frozen":
            x = cache[1]
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            dscale = (x * self.buffers["fold_scale"].reshape(bs) - self.buffers["running_mean"].reshape(bs))
            self.grads["gamma"] = (dout * dscale * inv.reshape(bs)).sum(axis=axes)
            self.grads["beta"] = dout.sum(axis=axes)
            return dout * self.affine()[0].reshape(bs)
        _, xhat, inv, axes = cache
        m = dout.size / dout.shape[1]
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * self.params["gamma"].reshape(bs)
        return inv / m * (m * dxhat - dxhat.sum(axis=axes).reshape(bs)
                          - xhat * (dxhat * xhat).sum(axis=axes).reshape(bs))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._need_cache()


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._need_cache())


class LayerGraph:
    def __init__(self, layers: list[Layer]):
        self.layers = layers
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.folded = False

    def __getitem__(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def weight_layers(self) -> list[WeightLayer]:
        return [l for l in self.layers if isinstance(l, WeightLayer)]

    def following_bn(self, layer: Layer) -> BatchNorm | None:
        i = self.layers.index(layer)
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], BatchNorm):
            return self.layers[i + 1]
        return None

    def validate(self) -> None:
        for l in self.weight_layers():
            if l.site is None:
                continue
            if l.site.scheme.n_filters != l.n_filters:
                raise ShapeError(f"{l.name}: group scheme covers {l.site.scheme.n_filters} filters, "
                                 f"layer has {l.n_filters}")
            if l.site.scheme.n_groups > 1 and self.following_bn(l) is None:
                raise FoldError(f"{l.name}: grouped quantization requires a following batch-norm layer")

    def set_quant_enabled(self, enabled: bool) -> None:
        for l in self.weight_layers():
            if l.site is not None:
                l.site.enabled = enabled

    def forward(self, x, train: bool = False):
        if train and self.folded:
            raise GraphStateError("a folded graph is inference-only")
        x = np.asarray(x, dtype=np.float64)
        for l in self.layers:
            x = l.forward(x, train)
            if not np.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation after layer {l.name}")
        return x

    def backward(self, grad):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return {f"{l.name}.{k}": g for l in self.layers for k, g in l.grads.items()}

    def named_params(self):
        for l in self.layers:
            for k, v in l.params.items():
                yield f"{l.name}.{k}", l, k

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            for k, v in l.params.items():
                out[f"{l.name}.{k}"] = v
            for k, v in l.buffers.items():
                out[f"{l.name}.{k}"] = v
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for l in self.layers:
            for store in (l.params, l.buffers):
                for k in store:
                    key = f"{l.name}.{k}"
                    if key not in tensors:
                        raise KeyError(f"missing tensor {key}")
                    if tensors[key].shape != store[k].shape:
                        raise ShapeError(f"{key}: shape {tensors[key].shape} != {store[k].shape}")
                    store[k] = np.array(tensors[key], dtype=np.float64)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def build_toy_cnn(in_ch: int, size: int, classes: int, widths=(16, 32, 64), seed: int = 0) -> LayerGraph:
    """conv-BN-ReLU x3 (strides 1, 2, 2) followed by a dense classifier."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c, s = in_ch, size
    for i, (w, stride) in enumerate(zip(widths, (1, 2, 2)), start=1):
        layers += [Conv2D(f"conv{i}", c, w, 3, stride, 1, rng=rng), BatchNorm(f"bn{i}", w), ReLU(f"relu{i}")]
        c, s = w, (s + 2 - 3) // stride + 1
    layers += [Flatten("flatten"), Dense("fc", c * s * s, classes, rng=rng)]
    return LayerGraph(layers)


def configure_quant(graph: LayerGraph, *, bits_w: int | None, bits_a: int | None, gs: int = LAYER_WISE,
                    alpha_source: str = "scale_clip", clip: ClipConfig | None = None,
                    skip_first_layer: bool = True) -> LayerGraph:
    """Attach a QuantSite to every weight layer.

    Layers followed by batch norm are partitioned with ``gs``; others stay
    layer-wise. Layers whose input comes from a ReLU get an activation tracker.
    Quantizers start disabled.
    """
    clip = clip or ClipConfig()
    for i, l in enumerate(graph.weight_layers()):
        group = gs if graph.following_bn(l) is not None else LAYER_WISE
        first = i == 0 and skip_first_layer
        idx = graph.layers.index(l)
        prev = [p for p in graph.layers[:idx] if not isinstance(p, Flatten)]
        post_relu = bool(prev) and isinstance(prev[-1], ReLU)
        l.site = QuantSite(
            scheme=partition_filters(l.n_filters, group),
            w_bits=None if first else bits_w,
            a_bits=None if first else bits_a,
            alpha_source=alpha_source,
            clip=clip,
            tracker=ActivationTracker() if post_relu else None,
        )
    graph.validate()
    return graph


def site_config(site: QuantSite) -> dict:
    return {"scheme": site.scheme.to_dict(), "w_bits": site.w_bits, "a_bits": site.a_bits,
            "alpha_source": site.alpha_source,
            "clip": {"k_w": site.clip.k_w, "k_a": site.clip.k_a, "lambda": site.clip.lam},
            "tracker": site.tracker.to_dict() if site.tracker is not None else None,
            "enabled": site.enabled}


def site_from_config(d: dict) -> QuantSite:
    c = d["clip"]
    return QuantSite(scheme=GroupScheme.from_dict(d["scheme"]), w_bits=d["w_bits"], a_bits=d["a_bits"],
                     alpha_source=d["alpha_source"], clip=ClipConfig(c["k_w"], c["k_a"], c["lambda"]),
                     tracker=ActivationTracker.from_dict(d["tracker"]) if d["tracker"] else None,
                     enabled=d["enabled"])


def graph_config(graph: LayerGraph) -> dict:
    layers = []
    for l in graph.layers:
        cfg = l.config()
        if isinstance(l, WeightLayer) and l.site is not None:
            cfg["site"] = site_config(l.site)
        layers.append(cfg)
    return {"layers": layers, "folded": graph.folded}


def graph_from_config(cfg: dict) -> LayerGraph:
    """Rebuild the layer structure; parameter values come from ``load_state``."""
    layers: list[Layer] = []
    for d in cfg["layers"]:
        kind = d["kind"]
        if kind == "conv":
            l = Conv2D(d["name"], d["in_ch"], d["out_ch"], d["kernel"], d["stride"], d["pad"], d["bias"])
        elif kind == "dense":
            l = Dense(d["name"], d["in_features"], d["out_features"])
        elif kind == "batchnorm":
            l = BatchNorm(d["name"], d["channels"], d["eps"], d["momentum"])
            l.frozen = d["frozen"]
        elif kind == "relu":
            l = ReLU(d["name"])
        elif kind == "flatten":
            l = Flatten(d["name"])
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        if "site" in d:
            l.site = site_from_config(d["site"])
        layers.append(l)
    g = LayerGraph(layers)
    g.folded = cfg.get("folded", False)
    g.validate()
    return g
