"""Wasserstein-1 and Jensen-Shannon on shared histogram grids, and the layer-averaged ARM."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from arm_meter import kernels
from arm_meter.stats import (
    BinningPolicy,
    GridMismatch,
    Histogram,
    joint_grids,
    trace_to_distributions,
)
from arm_meter.tensor_io import ActivationTrace


def _check_grid(a: Histogram, b: Histogram) -> None:
    if not a.same_grid(b):
        raise GridMismatch(
            f"grid mismatch: [{a.lo}, {a.hi}]x{a.bins} vs [{b.lo}, {b.hi}]x{b.bins}"
        )


def wasserstein1(a: Histogram, b: Histogram) -> float:
    """W1 between two histograms, each bin's mass placed at its center.

    On a uniform grid this is the bin width times the L1 distance of the CDFs.
    """
    _check_grid(a, b)
    return a.width * kernels.cdf_l1(a.mass, b.mass)


def jensen_shannon(a: Histogram, b: Histogram) -> float:
    """JS divergence in nats; 0 for equal histograms, ln 2 for disjoint supports."""
    _check_grid(a, b)
    m = 0.5 * (a.mass + b.mass)

    def kl_to_m(p: np.ndarray) -> float:
        nz = p > 0
        return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))

    return max(0.0, 0.5 * kl_to_m(a.mass) + 0.5 * kl_to_m(b.mass))


@dataclass
class LayerDistance:
    layer: str
    wd: float
    lo: float
    hi: float


@dataclass
class ArmReport:
    model_id: str
    dataset_pair: tuple[str, str]
    per_layer: list[LayerDistance] = field(default_factory=list)
    arm: float = 0.0
    bins: int = 256

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_pair": list(self.dataset_pair),
            "per_layer": [
                {"layer": d.layer, "wd": d.wd, "lo": d.lo, "hi": d.hi} for d in self.per_layer
            ],
            "arm": self.arm,
            "bins": self.bins,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArmReport":
        return cls(
            model_id=data["model_id"],
            dataset_pair=tuple(data["dataset_pair"]),
            per_layer=[
                LayerDistance(d["layer"], float(d["wd"]), float(d["lo"]), float(d["hi"]))
                for d in data["per_layer"]
            ],
            arm=float(data["arm"]),
            bins=int(data.get("bins", 256)),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def mean_of(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def arm(
    trace1: ActivationTrace,
    trace2: ActivationTrace,
    policy: BinningPolicy = BinningPolicy(),
) -> ArmReport:
    """Mean over layers of W1 between each layer's distribution on two datasets."""
    if trace1.model_id != trace2.model_id:
        raise ValueError(f"traces come from different models: {trace1.model_id!r} vs {trace2.model_id!r}")
    grids = joint_grids(trace1, trace2)
    d1 = trace_to_distributions(trace1, grids, policy)
    d2 = trace_to_distributions(trace2, grids, policy)
    per_layer = []
    for (name, h1), (_, h2) in zip(d1, d2):
        lo, hi = grids[name]
        per_layer.append(LayerDistance(name, wasserstein1(h1, h2), lo, hi))
    return ArmReport(
        model_id=trace1.model_id,
        dataset_pair=(trace1.dataset_id, trace2.dataset_id),
        per_layer=per_layer,
        arm=mean_of([d.wd for d in per_layer]),
        bins=policy.bins,
    )
