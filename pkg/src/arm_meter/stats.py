"""Per-filter and per-layer activation distributions.

A filter's distribution is a normalized equal-width histogram of its
spatially averaged activation over every sample of a dataset. A layer's
distribution is the unweighted bin-wise mean of its filters' histograms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from arm_meter import kernels
from arm_meter.tensor_io import ActivationTrace, LayerTrace

MASS_TOL = 1e-9
DEGENERATE_HALF_WIDTH = 1e-6


class GridMismatch(ValueError):
    pass


@dataclass(eq=False)
class Histogram:
    lo: float
    hi: float
    mass: np.ndarray

    def __post_init__(self):
        self.lo = float(self.lo)
        self.hi = float(self.hi)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if not self.lo < self.hi:
            raise ValueError(f"histogram needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.mass.ndim != 1 or self.mass.size < 1:
            raise ValueError("mass must be a non-empty 1-D array")
        if np.any(self.mass < 0) or not np.all(np.isfinite(self.mass)):
            raise ValueError("mass must be finite and nonnegative")
        if abs(self.mass.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"mass sums to {self.mass.sum()!r}, expected 1")

    @property
    def bins(self) -> int:
        return self.mass.size

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.bins) + 0.5) * self.width

    def same_grid(self, other: "Histogram") -> bool:
        return self.lo == other.lo and self.hi == other.hi and self.bins == other.bins

    def __eq__(self, other) -> bool:
        if not isinstance(other, Histogram):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.mass, other.mass)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "bins": self.bins, "mass": self.mass.tolist()}


@dataclass(frozen=True)
class BinningPolicy:
    bins: int = 256
    range_rule: str = "joint_min_max"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        if self.range_rule != "joint_min_max":
            raise ValueError(f"unsupported range rule {self.range_rule!r}")


def average_activation(feature_map) -> float:
    """Mean over an ``h x w`` activation map."""
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.size == 0:
        raise ValueError("empty feature map")
    if not np.all(np.isfinite(fmap)):
        raise ValueError("feature map has non-finite entries")
    return float(fmap.sum() / fmap.size)


def _normalized_counts(values2d: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    counts = kernels.filter_histograms(np.ascontiguousarray(values2d, dtype=np.float64), lo, hi, bins)
    return counts / values2d.shape[1]


def filter_distribution(values, lo: float, hi: float, policy: BinningPolicy = BinningPolicy()) -> Histogram:
    """Histogram of one filter's activations; out-of-range values land in the end bins."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty values")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    return Histogram(lo, hi, _normalized_counts(values[None, :], lo, hi, policy.bins)[0])


def layer_distribution(filters: Sequence[Histogram]) -> Histogram:
    if not filters:
        raise ValueError("no filter histograms")
    first = filters[0]
    for h in filters[1:]:
        if not h.same_grid(first):
            raise GridMismatch("filter histograms are on different grids")
    mass = np.mean([h.mass for h in filters], axis=0)
    return Histogram(first.lo, first.hi, mass)


def joint_range(*layers: LayerTrace) -> tuple[float, float]:
    """Min/max over every value of the given layers, widened when degenerate."""
    lo = min(float(layer.values.min()) for layer in layers)
    hi = max(float(layer.values.max()) for layer in layers)
    if hi <= lo:
        lo, hi = lo - DEGENERATE_HALF_WIDTH, hi + DEGENERATE_HALF_WIDTH
    return lo, hi


def layer_histogram(layer: LayerTrace, lo: float, hi: float, policy: BinningPolicy) -> Histogram:
    """All filters of a layer binned in one kernel call, then averaged."""
    if layer.n_samples == 0:
        raise ValueError(f"layer {layer.layer_name!r} has no samples")
    per_filter = _normalized_counts(layer.values, lo, hi, policy.bins)
    return Histogram(lo, hi, per_filter.mean(axis=0))


def trace_to_distributions(
    trace: ActivationTrace,
    grids: dict[str, tuple[float, float]],
    policy: BinningPolicy = BinningPolicy(),
) -> list[tuple[str, Histogram]]:
    out = []
    for layer in trace.layers:
        if layer.layer_name not in grids:
            raise KeyError(f"missing grid for layer {layer.layer_name!r}")
        lo, hi = grids[layer.layer_name]
        out.append((layer.layer_name, layer_histogram(layer, lo, hi, policy)))
    return out


def joint_grids(trace1: ActivationTrace, trace2: ActivationTrace) -> dict[str, tuple[float, float]]:
    check_compatible(trace1, trace2)
    return {a.layer_name: joint_range(a, b) for a, b in zip(trace1.layers, trace2.layers)}


def check_compatible(trace1: ActivationTrace, trace2: ActivationTrace) -> None:
    if trace1.layer_names != trace2.layer_names:
        raise ValueError(
            f"layer structure mismatch: {trace1.layer_names} vs {trace2.layer_names}"
        )
    for a, b in zip(trace1.layers, trace2.layers):
        if a.n_filters != b.n_filters:
            raise ValueError(
                f"layer {a.layer_name!r}: {a.n_filters} filters vs {b.n_filters}"
            )
