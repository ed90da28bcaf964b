import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gdrq.reshape import (ActivationTracker, ClipConfig, ReshapeError, clip_weights, excess_kurtosis,
                          reshape_metrics, update_activation_threshold, weight_threshold)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
weights = arrays(np.float64, st.integers(1, 80), elements=finite)


def test_threshold_uniform_weights():
    w = np.linspace(-1, 1, 100_001)
    assert weight_threshold(w, 2.0) == pytest.approx(1.0, rel=1e-4)


def test_threshold_hand_value():
    assert weight_threshold([0.1, -0.3], 3.0) == pytest.approx(0.6)


def test_threshold_infinite_factor():
    assert weight_threshold([1.0, 2.0], math.inf) == math.inf


def test_threshold_empty():
    with pytest.raises(ReshapeError):
        weight_threshold([], 2.0)


def test_clip_hand_value():
    np.testing.assert_array_equal(clip_weights([-5.0, 0.2, 5.0], 1.0), [-1.0, 0.2, 1.0])


def test_clip_interior_untouched():
    w = np.random.default_rng(0).uniform(-0.9, 0.9, 50)
    np.testing.assert_array_equal(clip_weights(w, 1.0), w)


def test_clip_infinite_is_copy():
    w = np.array([3.0, -7.0])
    out = clip_weights(w, math.inf)
    np.testing.assert_array_equal(out, w)
    assert out is not w


def test_clip_rejects_nonpositive():
    with pytest.raises(ReshapeError):
        clip_weights([1.0], 0.0)


@given(weights, st.floats(0.01, 60))
def test_clip_idempotent(w, t):
    once = clip_weights(w, t)
    np.testing.assert_array_equal(clip_weights(once, t), once)


@given(weights, st.floats(0.01, 60))
def test_clip_energy(w, t):
    out = clip_weights(w, t)
    assert np.abs(out).sum() <= np.abs(w).sum() + 1e-12
    if np.all(np.abs(w) <= t):
        assert np.abs(out).sum() == np.abs(w).sum()
    else:
        assert np.abs(out).sum() < np.abs(w).sum()


@pytest.mark.parametrize("kw", [dict(k_w=0.5), dict(k_a=0.0), dict(lam=0.0), dict(lam=1.5)])
def test_clip_config_validation(kw):
    with pytest.raises(ReshapeError):
        ClipConfig(**kw)


def test_clip_config_infinite():
    assert not ClipConfig(k_w=math.inf).reshapes_weights
    assert ClipConfig(k_w=2.5).reshapes_weights


def test_tracker_first_update_initializes():
    t = update_activation_threshold(ActivationTracker(), np.full(10, 0.5), k_a=4.0, lam=0.01)
    assert t.initialized and t.t_a == pytest.approx(2.0) and t.update_count == 1


def test_tracker_fixed_point():
    t = ActivationTracker(t_a=2.0, initialized=True)
    update_activation_threshold(t, np.full(4, 0.5), k_a=4.0, lam=0.7)
    assert t.t_a == pytest.approx(2.0)


def test_tracker_one_step():
    t = ActivationTracker(t_a=2.0, initialized=True)
    update_activation_threshold(t, np.ones(3), k_a=1.0, lam=0.5)
    assert t.t_a == pytest.approx(1.5)


def test_tracker_converges():
    t = ActivationTracker(t_a=10.0, initialized=True)
    for _ in range(100):
        update_activation_threshold(t, np.full(8, 0.25), k_a=4.0, lam=0.1)
    assert abs(t.t_a - 1.0) < 1e-4 * 1.0 + 9.0 * 0.9**100


@given(st.floats(0.01, 100), st.floats(0.01, 10), st.floats(0.01, 1.0))
def test_tracker_monotone_approach(t0, m, lam):
    t = ActivationTracker(t_a=t0, initialized=True)
    gaps = []
    for _ in range(5):
        update_activation_threshold(t, np.array([m]), k_a=1.0, lam=lam)
        gaps.append(abs(t.t_a - m))
    assert all(b <= a * (1 - lam) + 1e-9 * m for a, b in zip([abs(t0 - m)] + gaps, gaps))


def test_tracker_rejects_zero_activations():
    with pytest.raises(ReshapeError):
        update_activation_threshold(ActivationTracker(), np.zeros(5), k_a=4.0, lam=0.1)


def test_tracker_roundtrip():
    t = ActivationTracker(1.25, True, 7)
    assert ActivationTracker.from_dict(t.to_dict()) == t


@pytest.mark.parametrize("sample,expected", [
    (lambda r: r.uniform(-2, 2, 1_000_000), -1.2),
    (lambda r: r.normal(0, 3, 1_000_000), 0.0),
    (lambda r: r.choice([-1.5, 1.5], 1_000_000), -2.0),
])
def test_kurtosis_reference_values(sample, expected):
    assert excess_kurtosis(sample(np.random.default_rng(0))) == pytest.approx(expected, abs=0.02)


def test_kurtosis_degenerate():
    with pytest.raises(ReshapeError):
        excess_kurtosis(np.ones(10))
    with pytest.raises(ReshapeError):
        excess_kurtosis([1.0, 2.0])


def test_clipping_lowers_kurtosis():
    w = np.random.default_rng(1).laplace(size=10_000)
    k_before, _ = reshape_metrics(w)
    k_after, frac = reshape_metrics(clip_weights(w, weight_threshold(w, 2.0)))
    assert k_after < k_before
    assert 0 < frac < 1
