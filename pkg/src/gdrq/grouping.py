"""Per-filter-group quantization and folding of group scales into batch norm."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .quant import (QuantError, RangeMode, ZeroNormError, max_code, optimal_alpha,
                    quantize_codes)
from .reshape import weight_threshold

LAYER_WISE = -1


class GroupingError(ValueError):
    pass


class FoldError(GroupingError):
    pass


@dataclass
class GroupScheme:
    group_size: int
    boundaries: list[tuple[int, int]]
    alphas: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.boundaries = [(int(a), int(b)) for a, b in self.boundaries]
        self.alphas = [float(a) for a in self.alphas]
        if self.alphas and len(self.alphas) != len(self.boundaries):
            raise GroupingError(f"{len(self.alphas)} alphas for {len(self.boundaries)} groups")
        if any(not a > 0 for a in self.alphas):
            raise GroupingError(f"group alphas must be positive, got {self.alphas}")

    @property
    def n_groups(self) -> int:
        return len(self.boundaries)

    @property
    def n_filters(self) -> int:
        return self.boundaries[-1][1]

    def with_alphas(self, alphas) -> "GroupScheme":
        return replace(self, alphas=[float(a) for a in alphas])

    def channel_alphas(self) -> np.ndarray:
        """Alpha of the group each output filter belongs to."""
        out = np.empty(self.n_filters)
        for (a, b), alpha in zip(self.boundaries, self.alphas):
            out[a:b] = alpha
        return out

    def to_dict(self) -> dict:
        return {"group_size": self.group_size, "boundaries": [list(b) for b in self.boundaries],
                "alphas": list(self.alphas)}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupScheme":
        return cls(int(d["group_size"]), [tuple(b) for b in d["boundaries"]], list(d.get("alphas", [])))


@dataclass
class BnFoldPlan:
    per_channel_scale: np.ndarray
    reference_alpha: float


def partition_filters(n_filters: int, gs: int) -> GroupScheme:
    """Consecutive blocks of ``gs`` filters; the last block takes any remainder."""
    if n_filters < 1:
        raise GroupingError(f"need at least one filter, got {n_filters}")
    if gs == 0 or gs < LAYER_WISE:
        raise GroupingError(f"group size must be >= 1 or -1, got {gs}")
    if gs == LAYER_WISE or gs >= n_filters:
        return GroupScheme(gs, [(0, n_filters)])
    starts = list(range(0, n_filters, gs))
    return GroupScheme(gs, [(s, min(s + gs, n_filters)) for s in starts])


def _groups(weights: np.ndarray, scheme: GroupScheme):
    if scheme.n_filters != weights.shape[0]:
        raise GroupingError(f"scheme covers {scheme.n_filters} filters, weights have {weights.shape[0]}")
    for a, b in scheme.boundaries:
        yield weights[a:b]


def group_optimal_alphas(weights, scheme: GroupScheme, bits: int) -> GroupScheme:
    """Fill each group's alpha with its own quantized-loss minimizer.

    The per-group objective is normalized by the whole-layer norm, a constant
    that leaves every group's argmin unchanged.
    """
    weights = np.asarray(weights, dtype=np.float64)
    alphas = []
    for i, g in enumerate(_groups(weights, scheme)):
        try:
            alphas.append(optimal_alpha(g, bits, RangeMode.SYMMETRIC).alpha_star)
        except ZeroNormError:
            raise ZeroNormError(f"group {i} {scheme.boundaries[i]} has zero L1 norm") from None
    return scheme.with_alphas(alphas)


def group_scale_clip_alphas(weights, scheme: GroupScheme, k_w: float) -> GroupScheme:
    """Alphas tied to the Scale-Clip thresholds ``k_w * mean|G_l|``.

    With ``k_w = inf`` there is no clip, so each group uses its max magnitude.
    """
    weights = np.asarray(weights, dtype=np.float64)
    alphas = []
    for i, g in enumerate(_groups(weights, scheme)):
        t = weight_threshold(g, k_w)
        if not np.isfinite(t):
            t = float(np.abs(g).max())
        if not t > 0:
            raise ZeroNormError(f"group {i} {scheme.boundaries[i]} has zero L1 norm")
        alphas.append(t)
    return scheme.with_alphas(alphas)


def group_codes(weights, scheme: GroupScheme, bits: int) -> np.ndarray:
    """Integer grid codes of every weight under its group's alpha."""
    if not scheme.alphas:
        raise GroupingError("group alphas are not filled")
    weights = np.asarray(weights, dtype=np.float64)
    shape = (-1,) + (1,) * (weights.ndim - 1)
    alpha = scheme.channel_alphas().reshape(shape)
    return quantize_codes(weights, bits, RangeMode.SYMMETRIC, alpha)


def group_quantize(weights, scheme: GroupScheme, bits: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if not np.isfinite(weights).all():
        raise QuantError("non-finite weights")
    shape = (-1,) + (1,) * (weights.ndim - 1)
    step = scheme.channel_alphas().reshape(shape) / max_code(bits)
    return group_codes(weights, scheme, bits) * step


def fold_groups_into_bn(weights, scheme: GroupScheme, bits: int, bn_params) -> tuple[BnFoldPlan, np.ndarray]:
    """Re-grid every group onto the largest alpha and move the ratios into BN.

    Returns the plan and the re-gridded weights ``codes * s(reference_alpha)``.
    Multiplying BN's per-channel ``gamma / sigma`` by ``plan.per_channel_scale``
    restores the grouped layer's output exactly.
    """
    if bn_params is None:
        raise FoldError("group scales can only be merged into a following batch-norm layer")
    weights = np.asarray(weights, dtype=np.float64)
    gamma = np.asarray(bn_params[0])
    if gamma.shape[0] != weights.shape[0]:
        raise FoldError(f"batch norm has {gamma.shape[0]} channels, layer has {weights.shape[0]} filters")
    codes = group_codes(weights, scheme, bits)
    ref = max(scheme.alphas)
    plan = BnFoldPlan(per_channel_scale=scheme.channel_alphas() / ref, reference_alpha=ref)
    return plan, codes * (ref / max_code(bits))
