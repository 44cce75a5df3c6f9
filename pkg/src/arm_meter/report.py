"""Render an observation file into tables and raw plot series.

Outputs a markdown summary, a correlation CSV and a JSON file of plot series
(ARM against epochs, energy and carbon per model and kind, and true against
predicted epochs when a predictor is given). Nothing is drawn here.
"""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Sequence

from arm_meter.cost import (
    Observation,
    Predictor,
    correlation_table,
    predict_epochs,
    write_correlation_table,
)


def prediction_rows(obs: Sequence[Observation], predictor: Predictor) -> list[dict]:
    """Predicted epochs and signed residual (predicted minus true) for every modelled observation."""
    rows = []
    for o in obs:
        if o.model_id not in predictor.intercepts:
            continue
        predicted = predict_epochs(predictor, o.model_id, o.arm)
        rows.append(
            {
                "model_id": o.model_id,
                "noise_kind": o.noise_kind,
                "level": o.level,
                "arm": o.arm,
                "true_epochs": o.epochs,
                "predicted_epochs": predicted,
                "residual": predicted - o.epochs,
            }
        )
    return rows


def over_estimates(rows: Sequence[dict]) -> bool:
    """True when every residual is positive, i.e. the predictor systematically over-estimates."""
    return bool(rows) and all(r["residual"] > 0 for r in rows)


def plot_data(obs: Sequence[Observation], predictor: Predictor | None = None) -> dict:
    series: dict[str, dict[str, dict[str, list]]] = {}
    for o in obs:
        s = series.setdefault(o.model_id, {}).setdefault(
            o.noise_kind, {"level": [], "arm": [], "epochs": [], "energy_kwh": [], "co2_g": []}
        )
        s["level"].append(o.level)
        s["arm"].append(o.arm)
        s["epochs"].append(o.epochs)
        s["energy_kwh"].append(o.energy_kwh)
        s["co2_g"].append(o.co2_g)
    out: dict = {"series": series}
    if predictor is not None:
        rows = prediction_rows(obs, predictor)
        out["predictor"] = predictor.to_dict()
        out["predictions"] = rows
        out["over_estimates"] = over_estimates(rows)
    return out


def _fmt(value: float | None, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.{digits}g}"


def render_markdown(obs: Sequence[Observation], predictor: Predictor | None = None) -> str:
    lines = ["# Retraining cost report", "", "## Correlation between ARM and retraining measures", ""]
    lines.append("| model | noise | n | r (epochs) | p | r (kWh) | r (gCO2) |")
    lines.append("|---|---|---|---|---|---|---|")
    has_energy = all(o.energy_kwh is not None and o.co2_g is not None for o in obs)
    energy = {row.group: row for row in correlation_table(obs, y="energy_kwh")} if has_energy else {}
    carbon = {row.group: row for row in correlation_table(obs, y="co2_g")} if has_energy else {}
    for row in correlation_table(obs):
        e, c = energy.get(row.group), carbon.get(row.group)
        lines.append(
            f"| {row.group[0]} | {row.group[1]} | {row.n} | {_fmt(row.r)} | {_fmt(row.p, 3)} "
            f"| {_fmt(e.r) if e else 'n/a'} | {_fmt(c.r) if c else 'n/a'} |"
        )
    lines += ["", "## Observations", "", "| model | noise | level | ARM | epochs | kWh | gCO2 |", "|---|---|---|---|---|---|---|"]
    for o in obs:
        lines.append(
            f"| {o.model_id} | {o.noise_kind} | {o.level} | {_fmt(o.arm)} | {_fmt(o.epochs)} "
            f"| {_fmt(o.energy_kwh)} | {_fmt(o.co2_g)} |"
        )
    if predictor is not None:
        rows = prediction_rows(obs, predictor)
        lines += ["", "## Predicted epochs", "", f"Shared slope: {_fmt(predictor.slope)}", ""]
        lines += ["| model | noise | level | true | predicted | residual |", "|---|---|---|---|---|---|"]
        for r in rows:
            lines.append(
                f"| {r['model_id']} | {r['noise_kind']} | {r['level']} | {_fmt(r['true_epochs'])} "
                f"| {_fmt(r['predicted_epochs'])} | {r['residual']:+.3g} |"
            )
        if over_estimates(rows):
            lines += ["", "**Systematic over-estimation:** every residual is positive."]
    return "\n".join(lines) + "\n"


def write_report(
    obs: Sequence[Observation], out_dir: str | os.PathLike, predictor: Predictor | None = None
) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"markdown": out / "report.md", "correlation": out / "correlation.csv", "plot_data": out / "plot_data.json"}
    paths["markdown"].write_text(render_markdown(obs, predictor), encoding="utf-8")
    write_correlation_table(correlation_table(obs), paths["correlation"])
    data = plot_data(obs, predictor)
    with open(paths["plot_data"], "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, allow_nan=False)
    return paths
