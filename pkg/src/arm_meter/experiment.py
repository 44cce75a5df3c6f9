"""Desk-scale retraining-cost experiment.

For every (model, repeat) a base model is trained on clean synthetic data.
For every (kind, level) the clean data is corrupted, the base model's clean
and corrupted activation traces are compared with ARM, and a copy of the base
model is retrained on the corrupted data until it reaches the target accuracy
again. Per-repeat results are averaged into ``obs.csv``.

Every stage writes a small JSON marker last, holding a key derived from the
plan and the stage id plus hashes of the stage's artifacts. A rerun skips
stages whose marker and artifacts still match, so an interrupted run resumes
where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from arm_meter import __version__
from arm_meter.corruption import KINDS, corruption_spec, load_ladders
from arm_meter.cost import (
    Observation,
    PowerProfile,
    carbon_estimate,
    correlation_table,
    energy_estimate,
    write_correlation_table,
    write_observations,
)
from arm_meter.distance import arm
from arm_meter.kernels import BACKEND
from arm_meter.nn import (
    ModelSpec,
    TrainConfig,
    accuracy,
    forward_with_capture,
    holdout_split,
    init_model,
    load_model,
    save_model_weights,
    train_to_accuracy,
    zoo_spec,
)
from arm_meter.stats import BinningPolicy
from arm_meter.synthetic import GratingConfig, gratings
from arm_meter.tensor_io import encode_dataset, read_dataset, read_trace, write_trace

DEFAULT_POWER = PowerProfile(avg_power_watts=45.0, epoch_seconds=0.4, carbon_intensity_g_per_kwh=233.0, region="reference")
MANIFEST = "manifest.json"


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentPlan:
    models: list[str] = field(default_factory=lambda: ["toy-cnn-a", "toy-mlp"])
    noise_kinds: list[str] = field(default_factory=lambda: list(KINDS))
    levels: list[int] = field(default_factory=lambda: list(range(1, 8)))
    target_accuracy: float = 0.85
    repeats: int = 3
    seed: int = 0
    learning_rate: float = 0.05
    batch_size: int = 32
    base_max_epochs: int = 300
    max_epochs: int = 40
    bins: int = 256
    holdout_fraction: float = 0.1
    warm_start: bool = True
    keep_traces: bool = True
    data: GratingConfig = field(default_factory=GratingConfig)
    ladders: dict[str, list[float]] | None = None
    power_profile: PowerProfile = DEFAULT_POWER
    output_dir: str = "experiment"

    def __post_init__(self):
        self.models = list(self.models)
        self.noise_kinds = list(self.noise_kinds)
        self.levels = [int(v) for v in self.levels]
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not (self.models and self.noise_kinds and self.levels):
            raise ValueError("models, noise_kinds and levels must be non-empty")
        if self.ladders is None:
            self.ladders = load_ladders()
        for kind in self.noise_kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown noise kind {kind!r}")
            for level in self.levels:
                corruption_spec(kind, level, 0, self.ladders)
        for name in self.models:
            zoo_spec(name)
        self.output_dir = str(self.output_dir)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.repeats)]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["data"] = self.data.to_dict()
        out["data"]["contrast"] = list(self.data.contrast)
        out["power_profile"] = asdict(self.power_profile)
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown plan keys {sorted(unknown)}")
        kw = dict(data)
        if "data" in kw:
            grid = dict(kw["data"])
            if "contrast" in grid:
                grid["contrast"] = tuple(grid["contrast"])
            kw["data"] = GratingConfig(**grid)
        if "power_profile" in kw:
            kw["power_profile"] = PowerProfile(**kw["power_profile"])
        return cls(**kw)

    @classmethod
    def from_manifest(cls, path: str | os.PathLike, output_dir: str | os.PathLike | None = None) -> "ExperimentPlan":
        with open(path, encoding="utf-8") as fh:
            plan = dict(json.load(fh)["plan"])
        if output_dir is not None:
            plan["output_dir"] = str(output_dir)
        return cls.from_dict(plan)

    def fingerprint(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        content = self.to_dict()
        del content["output_dir"]
        return _sha256_text(json.dumps(content, sort_keys=True))

    def stage_key(self, *stage) -> str:
        return _sha256_text(json.dumps([self.fingerprint(), *stage]))


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _load_marker(path: Path, key: str) -> dict | None:
    """Return a completed stage's marker if its key and artifact hashes still match."""
    try:
        with open(path, encoding="utf-8") as fh:
            marker = json.load(fh)
    except (OSError, ValueError):
        return None
    if marker.get("key") != key:
        return None
    for name, digest in marker.get("artifacts", {}).items():
        artifact = path.parent / name
        if not artifact.exists() or _sha256_file(artifact) != digest:
            return None
    return marker


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

_DATASET_CACHE: dict[str, object] = {}


def _clean_dataset(root: Path):
    path = root / "data" / "clean.armd"
    key = str(path)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE.clear()
        _DATASET_CACHE[key] = read_dataset(path)
    return _DATASET_CACHE[key]


def _base_dir(root: Path, model: str, repeat: int) -> Path:
    return root / "base" / model / f"r{repeat}"


def _cell_dir(root: Path, model: str, kind: str, level: int, repeat: int) -> Path:
    return root / "cells" / model / kind / f"L{level}" / f"r{repeat}"


def prepare_data(plan: ExperimentPlan) -> Path:
    root = Path(plan.output_dir)
    path = root / "data" / "clean.armd"
    payload = encode_dataset(gratings(plan.data, name="clean"))
    if not path.exists() or path.read_bytes() != payload:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    return path


def run_base(plan: ExperimentPlan, model: str, repeat: int) -> dict:
    """Train the base model for one (model, repeat) on the clean training split."""
    root = Path(plan.output_dir)
    out = _base_dir(root, model, repeat)
    key = plan.stage_key("base", model, repeat)
    done = _load_marker(out / "base.json", key)
    if done is not None:
        return done
    seed = plan.seeds[repeat]
    ds = _clean_dataset(root)
    spec = zoo_spec(model, input_shape=ds.image_shape, num_classes=ds.num_classes, seed=seed)
    train_idx, hold_idx = holdout_split(len(ds), plan.holdout_fraction, seed)
    net = init_model(spec)
    cfg = TrainConfig(plan.target_accuracy, plan.base_max_epochs, plan.learning_rate, plan.batch_size, seed)
    report = train_to_accuracy(net, ds.subset(train_idx), cfg, ds.subset(hold_idx))
    if not report.reached_target:
        raise ExperimentError(
            "base-train",
            f"{model} repeat {repeat} stopped at accuracy {report.accuracy_curve[-1]:.3f} "
            f"after {report.epochs_used} epochs (target {plan.target_accuracy})",
        )
    _, trace = forward_with_capture(net, ds)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "spec.json")
    save_model_weights(net, out / "weights.bin")
    write_trace(trace, out / "clean.atf")
    marker = {
        "key": key,
        "model": model,
        "repeat": repeat,
        "seed": seed,
        "train": report.to_dict(),
        "artifacts": {name: _sha256_file(out / name) for name in ("spec.json", "weights.bin", "clean.atf")},
    }
    _write_json(out / "base.json", marker)
    return marker


def run_cell(plan: ExperimentPlan, model: str, kind: str, level: int, repeat: int) -> dict:
    """Corrupt, trace, measure ARM and retrain for one (model, kind, level, repeat)."""
    root = Path(plan.output_dir)
    out = _cell_dir(root, model, kind, level, repeat)
    key = plan.stage_key("cell", model, kind, level, repeat)
    done = _load_marker(out / "cell.json", key)
    if done is not None:
        return done
    base = _base_dir(root, model, repeat)
    if _load_marker(base / "base.json", plan.stage_key("base", model, repeat)) is None:
        raise ExperimentError("retrain", f"base model for {model} repeat {repeat} is missing")
    seed = plan.seeds[repeat]
    ds = _clean_dataset(root)

    try:
        corrupted = corruption_spec(kind, level, seed, plan.ladders).apply(ds)
    except ValueError as exc:
        raise ExperimentError("corrupt", f"{kind} level {level}: {exc}") from exc

    spec = ModelSpec.load(base / "spec.json")
    net = load_model(spec, base / "weights.bin")
    _, noisy_trace = forward_with_capture(net, corrupted)
    try:
        report = arm(read_trace(base / "clean.atf"), noisy_trace, BinningPolicy(plan.bins))
    except ValueError as exc:
        raise ExperimentError("arm", str(exc)) from exc

    train_idx, hold_idx = holdout_split(len(corrupted), plan.holdout_fraction, seed)
    holdout = corrupted.subset(hold_idx)
    if not plan.warm_start:
        net = init_model(spec)
    acc_before = accuracy(net, holdout)
    cfg = TrainConfig(plan.target_accuracy, plan.max_epochs, plan.learning_rate, plan.batch_size, seed)
    retrain = train_to_accuracy(net, corrupted.subset(train_idx), cfg, holdout)

    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "arm.json")
    artifacts = ["arm.json"]
    if plan.keep_traces:
        write_trace(noisy_trace, out / "trace.atf")
        artifacts.append("trace.atf")
    marker = {
        "key": key,
        "model": model,
        "kind": kind,
        "level": level,
        "repeat": repeat,
        "seed": seed,
        "arm": report.arm,
        "epochs": retrain.epochs_used,
        "reached_target": retrain.reached_target,
        "accuracy_before": acc_before,
        "train": retrain.to_dict(),
        "artifacts": {name: _sha256_file(out / name) for name in artifacts},
    }
    _write_json(out / "cell.json", marker)
    return marker


def _invoke(fn, plan_dict: dict, *args):
    # worker entry point: one BLAS thread keeps results identical across --jobs
    with threadpool_limits(1):
        return fn(ExperimentPlan.from_dict(plan_dict), *args)


def _run_stage(plan: ExperimentPlan, fn, tasks: list[tuple], jobs: int) -> dict[tuple, dict]:
    results: dict[tuple, dict] = {}
    plan_dict = plan.to_dict()
    if jobs <= 1:
        for task in tasks:
            results[task] = _invoke(fn, plan_dict, *task)
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(_invoke, fn, plan_dict, *task): task for task in tasks}
        finished, pending = wait(futures, return_when=FIRST_EXCEPTION)
        for fut in pending:
            fut.cancel()
        for fut in finished:
            results[futures[fut]] = fut.result()
    return results


# ---------------------------------------------------------------------------
# Aggregation and driver
# ---------------------------------------------------------------------------


def aggregate(plan: ExperimentPlan, cells: dict[tuple, dict]) -> list[Observation]:
    """Mean over repeats per (model, kind, level), in plan order."""
    obs = []
    for model in plan.models:
        for kind in plan.noise_kinds:
            for level in plan.levels:
                runs = [cells[(model, kind, level, rep)] for rep in range(plan.repeats)]
                arm_mean = math.fsum(r["arm"] for r in runs) / len(runs)
                epochs_mean = math.fsum(r["epochs"] for r in runs) / len(runs)
                kwh = energy_estimate(epochs_mean, plan.power_profile)
                obs.append(
                    Observation(model, kind, level, arm_mean, epochs_mean, kwh, carbon_estimate(kwh, plan.power_profile))
                )
    return obs


def _write_runs(plan: ExperimentPlan, cells: dict[tuple, dict], path: Path) -> None:
    cols = ["model_id", "noise_kind", "level", "repeat", "seed", "arm", "epochs", "reached_target",
            "accuracy_before", "wall_seconds"]
    lines = [",".join(cols)]
    for key in sorted(cells, key=lambda k: (plan.models.index(k[0]), plan.noise_kinds.index(k[1]), k[2], k[3])):
        c = cells[key]
        row = [c["model"], c["kind"], c["level"], c["repeat"], c["seed"], repr(c["arm"]), c["epochs"],
               c["reached_target"], repr(c["accuracy_before"]), repr(c["train"]["wall_seconds"])]
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _manifest(plan: ExperimentPlan, status: str, started: float, **extra) -> dict:
    specs = {
        m: zoo_spec(m, input_shape=(1, plan.data.size, plan.data.size), num_classes=plan.data.num_classes).to_dict()
        for m in plan.models
    }
    return {
        "status": status,
        "plan": plan.to_dict(),
        "fingerprint": plan.fingerprint(),
        "seeds": plan.seeds,
        "model_specs": specs,
        "version": __version__,
        "backend": BACKEND,
        "wall_seconds": time.perf_counter() - started,
        **extra,
    }


def run_experiment(plan: ExperimentPlan, jobs: int = 1) -> dict:
    """Run (or resume) the whole plan; returns the manifest that was written."""
    root = Path(plan.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    stage = "data"
    try:
        with threadpool_limits(1):
            prepare_data(plan)
            stage = "base-train"
            base_tasks = [(m, rep) for m in plan.models for rep in range(plan.repeats)]
            _run_stage(plan, run_base, base_tasks, jobs)
            stage = "retrain"
            cell_tasks = [
                (m, k, lvl, rep)
                for m in plan.models
                for k in plan.noise_kinds
                for lvl in plan.levels
                for rep in range(plan.repeats)
            ]
            cells = _run_stage(plan, run_cell, cell_tasks, jobs)
            stage = "aggregate"
            obs = aggregate(plan, cells)
            write_observations(obs, root / "obs.csv")
            write_correlation_table(correlation_table(obs), root / "correlation.csv")
            _write_runs(plan, cells, root / "runs.csv")
    except Exception as exc:
        failed_stage = exc.stage if isinstance(exc, ExperimentError) else stage
        manifest = _manifest(plan, "failed", started, failed_stage=failed_stage, error=str(exc))
        _write_json(root / MANIFEST, manifest)
        if isinstance(exc, ExperimentError):
            raise
        raise ExperimentError(failed_stage, f"{type(exc).__name__}: {exc}") from exc
    censored = sum(1 for c in cells.values() if not c["reached_target"])
    outputs = {name: _sha256_file(root / name) for name in ("obs.csv", "correlation.csv")}
    manifest = _manifest(plan, "complete", started, outputs=outputs, cells=len(cells), censored_cells=censored)
    _write_json(root / MANIFEST, manifest)
    return manifest
