"""Scale-Clip reshaping of weights and the tracked activation threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ReshapeError(ValueError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    """Scale-Clip factors; ``k_w = inf`` disables weight reshaping."""

    k_w: float = 2.0
    k_a: float = 4.0
    lam: float = 0.01

    def __post_init__(self):
        if not self.k_w >= 1:
            raise ReshapeError(f"k_w must be >= 1 (or inf), got {self.k_w}")
        if not self.k_a > 0:
            raise ReshapeError(f"k_a must be positive, got {self.k_a}")
        if not 0 < self.lam <= 1:
            raise ReshapeError(f"lambda must lie in (0, 1], got {self.lam}")

    @property
    def reshapes_weights(self) -> bool:
        return math.isfinite(self.k_w)


@dataclass
class ActivationTracker:
    t_a: float = 0.0
    initialized: bool = False
    update_count: int = 0

    def to_dict(self) -> dict:
        return {"t_a": self.t_a, "initialized": self.initialized, "update_count": self.update_count}

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationTracker":
        return cls(float(d["t_a"]), bool(d["initialized"]), int(d["update_count"]))


def weight_threshold(weights, k_w: float) -> float:
    weights = np.asarray(weights)
    if weights.size == 0:
        raise ReshapeError("cannot compute a threshold for an empty tensor")
    if math.isinf(k_w):
        return math.inf
    if not k_w > 0:
        raise ReshapeError(f"k_w must be positive, got {k_w}")
    return float(k_w * np.abs(weights).mean())


def clip_weights(weights, threshold: float) -> np.ndarray:
    weights = np.asarray(weights)
    if math.isinf(threshold):
        return weights.copy()
    if not threshold > 0:
        raise ReshapeError(f"clip threshold must be positive, got {threshold}")
    return np.clip(weights, -threshold, threshold)


def update_activation_threshold(tracker: ActivationTracker, batch_activations, k_a: float,
                                lam: float) -> ActivationTracker:
    """One descent step of ``T <- T - lam * (T - k_a * mean|A|)``.

    The first call sets ``T`` to ``k_a * mean|A|`` directly. The tracker is
    updated in place and returned.
    """
    acts = np.asarray(batch_activations)
    if acts.size == 0:
        raise ReshapeError("empty activation batch")
    if not 0 < lam <= 1:
        raise ReshapeError(f"lambda must lie in (0, 1], got {lam}")
    target = k_a * float(np.abs(acts).mean())
    if tracker.initialized:
        t_a = tracker.t_a - lam * (tracker.t_a - target)
    else:
        t_a = target
    if not t_a > 0:
        raise ReshapeError(
            f"activation threshold became nonpositive ({t_a}); degenerate activations or divergent lambda")
    tracker.t_a = t_a
    tracker.initialized = True
    tracker.update_count += 1
    return tracker


def excess_kurtosis(values) -> float:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 4:
        raise ReshapeError("kurtosis needs at least 4 elements")
    d = x - x.mean()
    var = float(np.mean(d * d))
    if var <= 1e-300 * max(1.0, float(np.max(np.abs(x))) ** 2):
        raise ReshapeError("kurtosis undefined for zero variance")
    return float(np.mean(d**4) / var**2 - 3.0)


def reshape_metrics(weights) -> tuple[float, float]:
    """(excess kurtosis, fraction of |w| >= 2 mean|w|)."""
    x = np.abs(np.asarray(weights, dtype=np.float64).ravel())
    kurt = excess_kurtosis(weights)
    return kurt, float(np.mean(x >= 2.0 * x.mean()))
