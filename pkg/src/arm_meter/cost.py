"""Retraining-cost predictors: epochs from ARM, energy and carbon from a power profile."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

OBS_COLUMNS = ("model_id", "noise_kind", "level", "arm", "epochs", "energy_kwh", "co2_g")


@dataclass
class Observation:
    model_id: str
    noise_kind: str
    level: int
    arm: float
    epochs: float
    energy_kwh: float | None = None
    co2_g: float | None = None

    def __post_init__(self):
        if not (self.arm >= 0 and self.epochs >= 0):
            raise ValueError(f"arm and epochs must be nonnegative: {self}")


@dataclass
class Predictor:
    """``epochs = slope * arm + intercepts[model_id]``."""

    slope: float
    intercepts: dict[str, float] = field(default_factory=dict)
    fitted_on: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not math.isfinite(self.slope):
            raise ValueError("slope must be finite")
        if not self.intercepts:
            raise ValueError("a predictor needs at least one intercept")

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercepts": dict(self.intercepts), "fitted_on": list(self.fitted_on)}

    @classmethod
    def from_dict(cls, data: dict) -> "Predictor":
        return cls(float(data["slope"]), {k: float(v) for k, v in data["intercepts"].items()},
                   list(data.get("fitted_on", [])))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Predictor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PowerProfile:
    avg_power_watts: float
    epoch_seconds: float
    carbon_intensity_g_per_kwh: float
    region: str = "unspecified"

    def __post_init__(self):
        if not (self.avg_power_watts > 0 and self.epoch_seconds > 0):
            raise ValueError("power and epoch duration must be positive")
        if not self.carbon_intensity_g_per_kwh >= 0:
            raise ValueError("carbon intensity must be nonnegative")


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------


def fit_predictor(obs: Sequence[Observation]) -> Predictor:
    """Least squares with one shared slope and a free intercept per model.

    Solves the normal equations in closed form: the slope comes from the
    within-model centered data, each intercept from its model's means.
    """
    if len(obs) < 2:
        raise ValueError("need at least 2 observations")
    groups: dict[str, list[Observation]] = {}
    for o in obs:
        groups.setdefault(o.model_id, []).append(o)
    sxy = sxx = 0.0
    means = {}
    for model_id, rows in groups.items():
        x = np.array([r.arm for r in rows], dtype=np.float64)
        y = np.array([r.epochs for r in rows], dtype=np.float64)
        means[model_id] = (x.mean(), y.mean())
        sxx += float(np.sum((x - x.mean()) ** 2))
        sxy += float(np.sum((x - x.mean()) * (y - y.mean())))
    if sxx <= 0:
        raise ValueError("degenerate design: arm does not vary within any model")
    slope = sxy / sxx
    intercepts = {m: float(my - slope * mx) for m, (mx, my) in means.items()}
    return Predictor(slope, intercepts, sorted(groups))


def fit_per_model(obs: Sequence[Observation]) -> dict[str, Predictor]:
    """Independent ordinary least-squares line for each model."""
    groups: dict[str, list[Observation]] = {}
    for o in obs:
        groups.setdefault(o.model_id, []).append(o)
    return {m: fit_predictor(rows) for m, rows in groups.items()}


def anchor_intercept(pred: Predictor, model_id: str, one_obs: Observation, overwrite: bool = False) -> Predictor:
    """Place a new model on the shared slope through a single measured point."""
    if model_id in pred.intercepts and not overwrite:
        raise ValueError(f"model {model_id!r} already has an intercept (pass overwrite=True)")
    intercepts = dict(pred.intercepts)
    intercepts[model_id] = one_obs.epochs - pred.slope * one_obs.arm
    return Predictor(pred.slope, intercepts, list(pred.fitted_on))


def predict_epochs(pred: Predictor, model_id: str, arm: float) -> float:
    if model_id not in pred.intercepts:
        raise KeyError(f"unknown model_id {model_id!r}")
    return max(0.0, pred.slope * arm + pred.intercepts[model_id])


def residual_sum_squares(pred: Predictor, obs: Iterable[Observation]) -> float:
    return float(sum((o.epochs - (pred.slope * o.arm + pred.intercepts[o.model_id])) ** 2 for o in obs))


# ---------------------------------------------------------------------------
# Energy and carbon
# ---------------------------------------------------------------------------


def energy_estimate(epochs: float, profile: PowerProfile) -> float:
    """kWh for ``epochs`` epochs at the profile's power draw and epoch duration."""
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    return epochs * profile.epoch_seconds * profile.avg_power_watts / 3.6e6


def carbon_estimate(kwh: float, profile: PowerProfile) -> float:
    """Grams CO2-equivalent for ``kwh`` at the profile's grid intensity."""
    if kwh < 0:
        raise ValueError("kwh must be nonnegative")
    return kwh * profile.carbon_intensity_g_per_kwh


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def pearson(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Sample correlation and its two-sided p-value under a Student-t with n-2 dof."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    # P(|T| > t) for T ~ t(df) is the regularized incomplete beta I_{df/(df+t^2)}(df/2, 1/2)
    p = float(special.betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, p


GROUP_KEYS = ("model_id", "noise_kind")


@dataclass(frozen=True)
class CorrelationRow:
    group: tuple[str, ...]
    n: int
    r: float
    p: float


def correlation_table(
    obs: Sequence[Observation], group_by: Sequence[str] = GROUP_KEYS, y: str = "epochs"
) -> list[CorrelationRow]:
    """Pearson r between ARM and ``y`` within each group, groups in first-seen order.

    Groups with fewer than 3 points or a constant column get ``nan`` for r and p.
    """
    for key in group_by:
        if key not in GROUP_KEYS:
            raise ValueError(f"cannot group by {key!r}; choose from {GROUP_KEYS}")
    groups: dict[tuple[str, ...], list[Observation]] = {}
    for o in obs:
        groups.setdefault(tuple(getattr(o, k) for k in group_by), []).append(o)
    rows = []
    for group, members in groups.items():
        ys = [getattr(o, y) for o in members]
        if any(v is None for v in ys):
            raise ValueError(f"column {y!r} has missing values")
        try:
            r, p = pearson([o.arm for o in members], ys)
        except ValueError:
            r = p = float("nan")
        rows.append(CorrelationRow(group, len(members), r, p))
    return rows


def write_correlation_table(
    rows: Sequence[CorrelationRow], path: str | os.PathLike, group_by: Sequence[str] = GROUP_KEYS
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*group_by, "n", "r", "p"])
        for row in rows:
            writer.writerow([*row.group, row.n, repr(row.r), repr(row.p)])


# ---------------------------------------------------------------------------
# obs.csv
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_observations(obs: Sequence[Observation], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBS_COLUMNS)
        for o in obs:
            writer.writerow([_fmt(getattr(o, c)) for c in OBS_COLUMNS])


class ObsFormatError(ValueError):
    pass


def read_observations(path: str | os.PathLike) -> list[Observation]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ObsFormatError(f"{path}: empty file")
        missing = [c for c in OBS_COLUMNS if c not in header]
        if missing:
            raise ObsFormatError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in OBS_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ObsFormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            def opt(name):
                cell = row[col[name]].strip()
                return float(cell) if cell else None

            try:
                out.append(
                    Observation(
                        model_id=row[col["model_id"]],
                        noise_kind=row[col["noise_kind"]],
                        level=int(row[col["level"]]),
                        arm=float(row[col["arm"]]),
                        epochs=float(row[col["epochs"]]),
                        energy_kwh=opt("energy_kwh"),
                        co2_g=opt("co2_g"),
                    )
                )
            except ValueError as exc:
                raise ObsFormatError(f"{path}:{lineno}: {exc}") from exc
    return out
