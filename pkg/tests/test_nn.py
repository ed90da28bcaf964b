import numpy as np
import pytest

from gdrq.grouping import FoldError, partition_filters
from gdrq.nn import (BatchNorm, Conv2D, Dense, Flatten, GraphStateError, LayerGraph, QuantSite, ReLU, ShapeError,
                     build_toy_cnn, configure_quant, graph_config, graph_from_config, softmax_cross_entropy)
from gdrq.quant import NonFiniteError
from gdrq.reshape import ActivationTracker, ClipConfig

EPS = 1e-6  # small enough not to straddle ReLU kinks in float64
RTOL = 1e-3


def numeric_grad(f, x):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + EPS
        hi = f()
        x[i] = old - EPS
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * EPS)
    return g


def assert_close_grad(analytic, numeric):
    scale = max(np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() <= RTOL * scale


def check_graph(graph, x, train=True):
    """Finite-difference check of every parameter and of the input gradient."""
    rng = np.random.default_rng(123)
    probe = rng.normal(size=graph.forward(x, train=False).shape)

    def loss():
        return float((graph.forward(x, train=train) * probe).sum())

    graph.forward(x, train=True)
    grad = probe
    for l in reversed(graph.layers):
        grad = l.backward(grad)
    grads = {f"{l.name}.{k}": g for l in graph.layers for k, g in l.grads.items()}
    for name, layer, key in graph.named_params():
        assert_close_grad(grads[name], numeric_grad(loss, layer.params[key]))
    assert_close_grad(grad, numeric_grad(loss, x))


def test_dense_identity():
    d = Dense("d", 3, 3)
    d.params["weight"] = np.eye(3)
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_array_equal(d.forward(x, False), x)


def test_conv_1x1_hand_value():
    c = Conv2D("c", 1, 1, kernel=1, stride=1, pad=0)
    c.params["weight"] = np.full((1, 1, 1, 1), 2.0)
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(c.forward(x, False), 2 * x)


def test_conv_3x3_hand_value():
    c = Conv2D("c", 1, 1, kernel=3, stride=1, pad=1)
    c.params["weight"] = np.ones((1, 1, 3, 3))
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = c.forward(x, False)[0, 0]
    assert out[1, 1] == x.sum()
    assert out[0, 0] == 0 + 1 + 3 + 4


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    c = Conv2D("c", 2, 3, kernel=3, stride=2, pad=1, bias=True, rng=rng)
    c.params["bias"] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 5, 5))
    out = c.forward(x, False)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = (patch * c.params["weight"][o]).sum() + c.params["bias"][o]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@pytest.mark.parametrize("stride,pad,bias", [(1, 1, False), (2, 1, True), (1, 0, True)])
def test_conv_gradients(stride, pad, bias):
    rng = np.random.default_rng(stride + pad)
    g = LayerGraph([Conv2D("c", 2, 3, 3, stride, pad, bias=bias, rng=rng)])
    if bias:
        g["c"].params["bias"] = rng.normal(size=3)
    check_graph(g, rng.normal(size=(2, 2, 5, 5)))


def test_dense_gradients():
    rng = np.random.default_rng(2)
    g = LayerGraph([Dense("d", 5, 4, rng=rng)])
    check_graph(g, rng.normal(size=(3, 5)))


def test_mlp_gradients():
    rng = np.random.default_rng(3)
    g = LayerGraph([Dense("d1", 4, 6, rng=rng), ReLU("r"), Dense("d2", 6, 3, rng=rng)])
    check_graph(g, rng.normal(size=(5, 4)))


@pytest.mark.parametrize("shape", [(6, 3), (4, 3, 2, 2)])
def test_batchnorm_train_gradients(shape):
    rng = np.random.default_rng(4)
    bn = BatchNorm("bn", 3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3)
    bn.params["beta"] = rng.normal(size=3)
    check_graph(LayerGraph([bn]), rng.normal(size=shape) * 2 + 1)


def test_batchnorm_frozen_gradients():
    rng = np.random.default_rng(5)
    bn = BatchNorm("bn", 3)
    bn.params["gamma"] = rng.uniform(0.5, 2, 3)
    bn.buffers["running_mean"] = rng.normal(size=3)
    bn.buffers["running_var"] = rng.uniform(0.5, 2, 3)
    bn.frozen = True
    check_graph(LayerGraph([bn]), rng.normal(size=(4, 3, 2, 2)))


def test_toy_cnn_gradients():
    g = build_toy_cnn(1, 6, 3, widths=(2, 3, 4), seed=6)
    check_graph(g, np.random.default_rng(6).normal(size=(3, 1, 6, 6)))


def test_flatten_relu_gradients():
    rng = np.random.default_rng(7)
    g = LayerGraph([ReLU("r"), Flatten("f"), Dense("d", 12, 2, rng=rng)])
    check_graph(g, rng.normal(size=(2, 3, 2, 2)))


def test_batchnorm_train_normalizes_and_tracks():
    rng = np.random.default_rng(8)
    bn = BatchNorm("bn", 2, momentum=0.0)
    x = rng.normal(3, 2, size=(500, 2, 3, 3))
    y = bn.forward(x, True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1, atol=1e-3)
    # with momentum 0 the running stats are this batch's, so eval reproduces train
    np.testing.assert_allclose(bn.forward(x, False), y, atol=1e-5)


def test_folded_batchnorm_refuses_training():
    bn = BatchNorm("bn", 2)
    bn.buffers["fold_scale"] = np.array([0.5, 1.0])
    with pytest.raises(GraphStateError):
        bn.forward(np.ones((2, 2)), True)


def test_softmax_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7))


def test_softmax_confident_logits():
    logits = np.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 2] = 50.0
    assert softmax_cross_entropy(logits, np.array([1, 2]))[0] < 1e-12


def test_softmax_gradient():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(4, 10))
    labels = rng.integers(0, 10, 4)
    _, grad = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-8)


def test_softmax_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def quant_dense(w, alpha, bits=2):
    d = Dense("d", w.shape[1], w.shape[0])
    d.params["weight"] = w.copy()
    d.site = QuantSite(scheme=partition_filters(w.shape[0], -1).with_alphas([alpha]), w_bits=bits,
                       alpha_source="fixed", enabled=True)
    return d


def test_ste_passes_gradient_inside_clip_range():
    rng = np.random.default_rng(10)
    w = rng.uniform(-0.9, 0.9, size=(3, 4))
    x = rng.normal(size=(5, 4))
    dout = rng.normal(size=(5, 3))
    d = quant_dense(w, 1.0)
    d.forward(x, True)
    d.backward(dout)
    # same as a float layer evaluated at the quantized point
    f = Dense("f", 4, 3)
    f.params["weight"] = d.site.weight_forward(w)[0]
    f.forward(x, True)
    f.backward(dout)
    np.testing.assert_allclose(d.grads["weight"], f.grads["weight"])


def test_ste_blocks_gradient_outside_clip_range():
    w = np.array([[0.5, 2.0, -2.0]])
    d = quant_dense(w, 1.0)
    d.forward(np.ones((2, 3)), True)
    d.backward(np.ones((2, 1)))
    assert d.grads["weight"][0, 0] != 0
    np.testing.assert_array_equal(d.grads["weight"][0, 1:], 0.0)


def test_activation_mask_zero_outside_clip():
    d = Dense("d", 3, 1)
    d.site = QuantSite(scheme=partition_filters(1, -1), tracker=ActivationTracker(1.0, True), a_bits=4,
                       enabled=True, clip=ClipConfig(lam=1e-9))
    x = np.array([[-0.5, 0.5, 3.0]])
    out = d.forward(x, True)
    dx = d.backward(np.ones((1, 1)))
    assert dx[0, 0] == 0 and dx[0, 2] == 0 and dx[0, 1] != 0
    # 3.0 is clipped to t_a = 1 and -0.5 to 0
    assert out.shape == (1, 1)


def test_disabled_sites_are_pass_through():
    g = build_toy_cnn(1, 8, 4, widths=(4, 8, 8), seed=11)
    x = np.random.default_rng(11).normal(size=(3, 1, 8, 8))
    ref = g.forward(x, False)
    configure_quant(g, bits_w=2, bits_a=4, gs=2, clip=ClipConfig(k_w=2.0))
    np.testing.assert_array_equal(g.forward(x, False), ref)


def test_quantized_forward_differs():
    g = build_toy_cnn(1, 8, 4, widths=(4, 8, 8), seed=12)
    configure_quant(g, bits_w=2, bits_a=2, gs=2, skip_first_layer=False)
    x = np.random.default_rng(12).normal(size=(3, 1, 8, 8))
    g.forward(x, True)
    ref = g.forward(x, False)
    g.set_quant_enabled(True)
    assert not np.allclose(g.forward(x, False), ref)


def test_configure_sites():
    g = configure_quant(build_toy_cnn(1, 8, 4, widths=(4, 8, 8)), bits_w=3, bits_a=4, gs=2)
    conv1, conv2, conv3, fc = g.weight_layers()
    assert conv1.site.w_bits is None and conv1.site.tracker is None
    assert conv2.site.scheme.n_groups == 4 and conv2.site.tracker is not None
    assert fc.site.scheme.n_groups == 1 and fc.site.tracker is not None
    assert not any(l.site.enabled for l in g.weight_layers())


def test_grouped_layer_without_bn_rejected():
    g = LayerGraph([Dense("d1", 4, 4), ReLU("r"), Dense("d2", 4, 2)])
    g["d1"].site = QuantSite(scheme=partition_filters(4, 2), w_bits=2)
    with pytest.raises(FoldError):
        g.validate()


def test_shape_errors():
    with pytest.raises(ShapeError):
        Dense("d", 3, 2).forward(np.ones((2, 4)), False)
    with pytest.raises(ShapeError):
        Conv2D("c", 2, 2).forward(np.ones((1, 3, 4, 4)), False)


def test_backward_without_forward():
    with pytest.raises(GraphStateError):
        Dense("d", 2, 2).backward(np.ones((1, 2)))


def test_nonfinite_activation_names_layer():
    g = LayerGraph([Dense("d", 2, 2)])
    g["d"].params["weight"][:] = np.inf
    with pytest.raises(NonFiniteError, match="layer d"):
        g.forward(np.ones((1, 2)))


def test_graph_config_roundtrip():
    g = configure_quant(build_toy_cnn(1, 8, 4, widths=(4, 8, 8), seed=13), bits_w=2, bits_a=4, gs=2)
    h = graph_from_config(graph_config(g))
    h.load_state(g.state())
    x = np.random.default_rng(13).normal(size=(2, 1, 8, 8))
    np.testing.assert_array_equal(h.forward(x, False), g.forward(x, False))
    assert graph_config(h) == graph_config(g)


def test_forward_deterministic():
    x = np.random.default_rng(14).normal(size=(2, 1, 8, 8))
    a = build_toy_cnn(1, 8, 4, seed=14).forward(x, True)
    b = build_toy_cnn(1, 8, 4, seed=14).forward(x, True)
    assert a.tobytes() == b.tobytes()
