"""Uniform fake-quantization, quantized-loss, and clipping-value search."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class QuantError(ValueError):
    pass


class InvalidSpecError(QuantError):
    pass


class ZeroNormError(QuantError):
    pass


class NonFiniteError(QuantError):
    pass


class RangeMode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    NONNEGATIVE = "nonnegative"


class Distribution(str, enum.Enum):
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    range_mode: RangeMode = RangeMode.SYMMETRIC
    alpha: float = 1.0

    def __post_init__(self):
        if not 1 <= int(self.bits) <= 8:
            raise InvalidSpecError(f"bits must be in 1..8, got {self.bits}")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise InvalidSpecError(f"alpha must be a positive finite number, got {self.alpha}")
        object.__setattr__(self, "range_mode", RangeMode(self.range_mode))

    @property
    def max_code(self) -> int:
        return max_code(self.bits, self.range_mode)

    @property
    def step(self) -> float:
        return self.alpha / self.max_code


@dataclass(frozen=True)
class QuantReport:
    ql: float
    alpha_star: float
    bits: int
    norm_order: int = 1


def max_code(bits: int, range_mode: RangeMode | str = RangeMode.SYMMETRIC) -> int:
    """Largest integer code; the grid step is ``alpha / max_code``.

    1-bit symmetric is the binary grid {-alpha, +alpha}, so its step is alpha.
    """
    if RangeMode(range_mode) is RangeMode.NONNEGATIVE:
        return 2**bits - 1
    return max(2 ** (bits - 1) - 1, 1)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def check_finite(values: np.ndarray, what: str = "input") -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite {what} element {values[idx]!r} at index {idx}")


def quantize_codes(values, bits: int, range_mode: RangeMode | str, alpha) -> np.ndarray:
    """Integer codes (as floats) of the clamped values; ``alpha`` may broadcast."""
    mode = RangeMode(range_mode)
    L = max_code(bits, mode)
    alpha = np.asarray(alpha, dtype=np.float64)
    step = alpha / L
    if mode is RangeMode.NONNEGATIVE:
        return round_half_away(np.clip(values, 0.0, alpha) / step)
    if bits == 1:
        return np.where(values >= 0, 1.0, -1.0)
    return round_half_away(np.clip(values, -alpha, alpha) / step)


def quantize(values, spec: QuantSpec) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    check_finite(values)
    return quantize_codes(values, spec.bits, spec.range_mode, spec.alpha) * spec.step


def _abs_sum(values: np.ndarray) -> float:
    norm = float(np.abs(values).sum())
    if norm == 0.0:
        raise ZeroNormError("quantized-loss is undefined for an all-zero tensor")
    return norm


def quantized_loss(values, spec: QuantSpec) -> QuantReport:
    """Relative L1 error ``sum|w - Q(w)| / sum|w|``."""
    values = np.asarray(values, dtype=np.float64)
    check_finite(values)
    norm = _abs_sum(values)
    err = float(np.abs(values - quantize(values, spec)).sum())
    return QuantReport(ql=err / norm, alpha_star=spec.alpha, bits=spec.bits)


def ql_curve(values: np.ndarray, alphas: np.ndarray, bits: int, range_mode, norm: float | None = None,
             chunk: int = 1 << 22) -> np.ndarray:
    """Quantized-loss at every candidate alpha, evaluated in memory-bounded chunks."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    if norm is None:
        norm = _abs_sum(flat)
    L = max_code(bits, range_mode)
    out = np.empty(alphas.size)
    rows = max(1, chunk // max(flat.size, 1))
    for i in range(0, alphas.size, rows):
        a = alphas[i:i + rows, None]
        q = quantize_codes(flat[None, :], bits, range_mode, a) * (a / L)
        out[i:i + rows] = np.abs(flat[None, :] - q).sum(axis=1)
    return out / norm


# The exact sweep builds 2*max_code events per element; past this budget
# optimal_alpha falls back to grid + golden-section refinement.
EXACT_EVENT_BUDGET = 1 << 22


def _exact_minimum(values: np.ndarray, bits: int, mode: RangeMode, hi: float, norm: float):
    """Global minimum of QL over all alpha > 0 by sweeping its breakpoints.

    Each element's error is piecewise linear in alpha, with slope changes at
    ``|w| L / n`` (exact representation, V-shaped) and ``|w| L / (n + 1/2)``
    (rounding switch). Past the last breakpoint every code is zero and the
    curve is flat. The sum is continuous, so its minimum sits at a kink where
    the slope turns nonnegative. Alphas above ``hi`` (the largest magnitude)
    are included: a coarser-than-needed grid can fit the values better, and
    leaving them out would let a sub-tensor do worse than its parent's alpha.
    """
    L = max_code(bits, mode)
    if mode is RangeMode.NONNEGATIVE:
        mags = values[values > 0]
    else:
        mags = np.abs(values[values != 0])
    if bits == 1 and mode is RangeMode.SYMMETRIC:
        # |w| - alpha below |w|, alpha - |w| above
        pos = mags
        delta = np.full(mags.size, 2.0)
    else:
        n = np.arange(1, L + 1, dtype=np.float64)
        zero_pts = (mags[:, None] * L / n[None, :]).ravel()
        zero_delta = np.broadcast_to(2.0 * n / L, (mags.size, L)).ravel()
        h = np.arange(0, L, dtype=np.float64)
        switch_pts = (mags[:, None] * L / (h[None, :] + 0.5)).ravel()
        switch_delta = np.broadcast_to(-(2.0 * h + 1.0) / L, (mags.size, L)).ravel()
        pos = np.concatenate([zero_pts, switch_pts])
        delta = np.concatenate([zero_delta, switch_delta])
    order = np.argsort(pos, kind="stable")
    pos, delta = pos[order], delta[order]
    # slope just right of 0: every nonzero element is clamped and loses 1 per unit alpha;
    # on the binary grid exact zeros map to +alpha and gain 1
    s0 = -float(mags.size)
    if bits == 1 and mode is RangeMode.SYMMETRIC:
        s0 += float(np.count_nonzero(values == 0))
    slope = np.concatenate([[s0], s0 + np.cumsum(delta)])
    knots = np.concatenate([[0.0], pos])
    err0 = float(np.abs(values).sum())
    err = err0 + np.concatenate([[0.0], np.cumsum(slope[:-1] * np.diff(knots))])
    # only points where slope turns from negative to nonnegative can be minima
    cand = np.flatnonzero((slope[:-1] < 0) & (slope[1:] >= 0)) + 1
    # re-evaluate the best candidates (and hi) directly to shed cumulative rounding
    best = cand[np.argsort(err[cand], kind="stable")[:8]]
    cand_alphas = np.concatenate([knots[best], [hi]])
    if slope[0] >= 0:
        # binary grid with at least as many zeros as nonzeros: the infimum sits at alpha -> 0
        cand_alphas = np.append(cand_alphas, max(knots[1] * 2.0 ** -52, np.nextafter(0.0, 1.0)))
    ql = ql_curve(values, cand_alphas, bits, mode, norm)
    i = int(np.argmin(ql))
    return float(cand_alphas[i]), float(ql[i])


def search_grid(hi: float, size: int = 1024) -> np.ndarray:
    """Hybrid candidate grid on (0, hi]: half linear, half geometric toward zero."""
    lin = hi * np.arange(1, size // 2 + 1) / (size // 2)
    geo = hi * np.geomspace(1e-4, 1.0, size - size // 2)
    return np.unique(np.concatenate([lin, geo]))


def _golden(f, lo: float, hi: float, iters: int = 60):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def optimal_alpha(values, bits: int, range_mode: RangeMode | str = RangeMode.SYMMETRIC,
                  exact: bool | None = None) -> QuantReport:
    """Clipping value minimizing the quantized-loss.

    Small problems are solved exactly over all alpha > 0 by a breakpoint
    sweep; larger ones search (0, max|values|] with a 1024-point hybrid grid
    followed by golden-section refinement of the best bracket. Either way the
    result is no worse than alpha = max|values|.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    check_finite(values)
    mode = RangeMode(range_mode)
    QuantSpec(bits, mode, 1.0)
    norm = _abs_sum(values)
    hi = float(values.max()) if mode is RangeMode.NONNEGATIVE else float(np.abs(values).max())
    if hi <= 0:
        # nonnegative grid over nonpositive data: every alpha clamps to zero
        return QuantReport(ql=1.0, alpha_star=float(np.abs(values).max()), bits=bits)
    if exact is None:
        exact = values.size * 2 * max_code(bits, mode) <= EXACT_EVENT_BUDGET
    if exact:
        alpha, ql = _exact_minimum(values, bits, mode, hi, norm)
        return QuantReport(ql=ql, alpha_star=alpha, bits=bits)

    grid = search_grid(hi)
    curve = ql_curve(values, grid, bits, mode, norm)
    i = int(np.argmin(curve))
    lo_a = grid[i - 1] if i > 0 else grid[0] * 1e-3
    hi_a = grid[i + 1] if i + 1 < grid.size else grid[i]
    f = lambda a: float(ql_curve(values, [a], bits, mode, norm)[0])  # noqa: E731
    a_ref, q_ref = _golden(f, lo_a, hi_a)
    if q_ref <= curve[i]:
        return QuantReport(ql=q_ref, alpha_star=a_ref, bits=bits)
    return QuantReport(ql=float(curve[i]), alpha_star=float(grid[i]), bits=bits)


def sample_distribution(kind: Distribution | str, scale: float, count: int, seed: int) -> np.ndarray:
    """Draw samples with ``scale`` = b (Laplace), sigma (Gaussian) or T (uniform on [-T, T])."""
    if count <= 0 or not scale > 0:
        raise ValueError("count and scale must be positive")
    rng = np.random.default_rng(seed)
    kind = Distribution(kind)
    if kind is Distribution.LAPLACE:
        return rng.laplace(0.0, scale, count)
    if kind is Distribution.GAUSSIAN:
        return rng.normal(0.0, scale, count)
    return rng.uniform(-scale, scale, count)


def scale_for_mean_abs(kind: Distribution | str, mean_abs: float) -> float:
    """Scale parameter giving E|x| == mean_abs for the given distribution."""
    kind = Distribution(kind)
    if kind is Distribution.LAPLACE:
        return mean_abs
    if kind is Distribution.GAUSSIAN:
        return mean_abs * math.sqrt(math.pi / 2)
    return 2.0 * mean_abs
