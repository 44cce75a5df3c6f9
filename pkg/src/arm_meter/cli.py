"""Command-line entry point: ``arm-meter``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 experiment
stage failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from arm_meter.corruption import KINDS, corruption_spec, load_ladders
from arm_meter.cost import (
    GROUP_KEYS,
    ObsFormatError,
    Observation,
    Predictor,
    anchor_intercept,
    correlation_table,
    fit_per_model,
    fit_predictor,
    predict_epochs,
    read_observations,
    write_correlation_table,
)
from arm_meter.distance import arm as arm_measure
from arm_meter.experiment import ExperimentError, ExperimentPlan, run_experiment
from arm_meter.nn import (
    ModelSpec,
    ShapeError,
    TrainConfig,
    forward_with_capture,
    init_model,
    load_model,
    save_model_weights,
    train_to_accuracy,
    zoo_spec,
)
from arm_meter.report import write_report
from arm_meter.stats import BinningPolicy, GridMismatch, check_compatible, joint_grids, trace_to_distributions
from arm_meter.synthetic import GratingConfig, gratings
from arm_meter.tensor_io import FormatError, read_dataset, read_trace, write_dataset, write_trace

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_STAGE = 4

GROUP_ALIASES = {"model": "model_id", "model_id": "model_id", "noise": "noise_kind", "noise_kind": "noise_kind"}


class Context:
    def __init__(self, seed: int, jobs: int, data_dir: Path, config: dict):
        self.seed = seed
        self.jobs = jobs
        self.data_dir = data_dir
        self.config = config

    def resolve_seed(self, local: int | None) -> int:
        return self.seed if local is None else local

    def default_path(self, name: str) -> Path:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        return self.data_dir / name


def _load_config(ctx: click.Context, _param, value):
    if value is None:
        return {}
    try:
        with open(value, "rb") as fh:
            config = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise click.BadParameter(str(exc)) from exc
    # top-level scalars default the global flags; tables default the subcommand of that name
    ctx.default_map = {**(ctx.default_map or {}), **config}
    return config


def _emit_json(data, out: Path | None) -> None:
    text = json.dumps(data, indent=2)
    if out is None:
        click.echo(text)
    else:
        Path(out).write_text(text + "\n", encoding="utf-8")


def _model_spec(value: str, ds_shape=None, num_classes=None, seed: int = 0) -> ModelSpec:
    """A JSON spec file, or the name of a built-in architecture."""
    path = Path(value)
    if path.exists():
        return ModelSpec.load(path)
    try:
        kw = {}
        if ds_shape is not None:
            kw = {"input_shape": ds_shape, "num_classes": num_classes}
        return zoo_spec(value, seed=seed, **kw)
    except ValueError:
        raise click.BadParameter(f"{value!r} is neither a spec file nor a built-in model", param_hint="--model-spec")


def _csv_list(value: str | None, cast=str) -> list | None:
    if value is None:
        return None
    try:
        return [cast(v.strip()) for v in str(value).split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


seed_option = click.option("--seed", type=int, default=None, help="Overrides the global --seed.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(dir_okay=False), callback=_load_config, is_eager=True,
              expose_value=True, help="TOML file with defaults for global flags and per-command tables.")
@click.option("--seed", type=int, default=0, show_default=True, help="Base seed for every random choice.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
@click.option("--data-dir", type=click.Path(file_okay=False), envvar="ARM_METER_DATA_DIR", default=".",
              show_default=True, help="Default artifact root (env ARM_METER_DATA_DIR).")
@click.pass_context
def cli(ctx: click.Context, config: dict, seed: int, jobs: int, data_dir: str):
    """Measure representation shift with ARM and predict retraining cost."""
    ctx.obj = Context(seed, jobs, Path(data_dir), config)


@cli.command()
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--samples", type=click.IntRange(min=1), default=GratingConfig.n_samples, show_default=True)
@click.option("--classes", type=click.IntRange(min=1), default=GratingConfig.num_classes, show_default=True)
@click.option("--size", type=click.IntRange(min=1), default=GratingConfig.size, show_default=True)
@seed_option
@click.pass_obj
def synth(obj: Context, out, samples, classes, size, seed):
    """Write the synthetic oriented-grating dataset."""
    cfg = GratingConfig(n_samples=samples, num_classes=classes, size=size, seed=obj.resolve_seed(seed))
    path = Path(out) if out else obj.default_path("gratings.armd")
    write_dataset(gratings(cfg, name=path.stem), path)
    click.echo(str(path))


@cli.command()
@click.option("--in", "in_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--kind", type=click.Choice(KINDS), required=True)
@click.option("--level", type=click.IntRange(min=1), required=True)
@click.option("--ladders", type=click.Path(exists=True, dir_okay=False), default=None, help="TOML ladder overrides.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@seed_option
@click.pass_obj
def corrupt(obj: Context, in_path, kind, level, ladders, out, seed):
    """Apply one severity level of a corruption to a dataset."""
    ds = read_dataset(in_path)
    spec = corruption_spec(kind, level, obj.resolve_seed(seed), load_ladders(ladders))
    result = spec.apply(ds)
    path = Path(out) if out else obj.default_path(f"{result.name}.armd")
    write_dataset(result, path)
    click.echo(str(path))


@cli.command()
@click.option("--model-spec", required=True, help="Spec JSON or built-in name (toy-cnn-a, toy-cnn-b, toy-mlp).")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@seed_option
@click.pass_obj
def trace(obj: Context, model_spec, weights, data, out, seed):
    """Capture per-filter averaged activations for every sample."""
    ds = read_dataset(data)
    spec = _model_spec(model_spec, ds.image_shape, ds.num_classes, obj.resolve_seed(seed))
    model = load_model(spec, weights)
    _, t = forward_with_capture(model, ds)
    path = Path(out) if out else obj.default_path(f"{ds.name}.atf")
    write_trace(t, path)
    click.echo(str(path))


@cli.command()
@click.option("--model-spec", required=True, help="Spec JSON or built-in name.")
@click.option("--weights-in", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Warm-start weights; omitted means a fresh initialization.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--target-acc", type=click.FloatRange(0, 1, min_open=True), default=0.85, show_default=True)
@click.option("--max-epochs", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--lr", type=click.FloatRange(0, min_open=True), default=TrainConfig.learning_rate, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=TrainConfig.batch_size, show_default=True)
@click.option("--from-scratch", is_flag=True, help="Ignore --weights-in and start from a fresh initialization.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Training report JSON (stdout if omitted).")
@click.option("--weights-out", type=click.Path(dir_okay=False), default=None)
@seed_option
@click.pass_obj
def train(obj: Context, model_spec, weights_in, data, target_acc, max_epochs, lr, batch_size, from_scratch, out,
          weights_out, seed):
    """Train until holdout accuracy reaches the target."""
    seed = obj.resolve_seed(seed)
    ds = read_dataset(data)
    spec = _model_spec(model_spec, ds.image_shape, ds.num_classes, seed)
    model = init_model(spec) if from_scratch or weights_in is None else load_model(spec, weights_in)
    report = train_to_accuracy(model, ds, TrainConfig(target_acc, max_epochs, lr, batch_size, seed))
    if weights_out:
        save_model_weights(model, weights_out)
    _emit_json(report.to_dict(), Path(out) if out else None)


@cli.command("arm")
@click.option("--trace1", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trace2", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bins", type=click.IntRange(min=2), default=256, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report JSON (stdout if omitted).")
def arm_cmd(trace1, trace2, bins, out):
    """ARM between two traces of the same model."""
    report = arm_measure(read_trace(trace1), read_trace(trace2), BinningPolicy(bins))
    _emit_json(report.to_dict(), Path(out) if out else None)


@cli.command()
@click.option("--trace", "trace_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--trace2", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Second trace; histograms of both share per-layer grids.")
@click.option("--bins", type=click.IntRange(min=2), default=256, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def stats(trace_path, trace2, bins, out):
    """Per-layer activation histograms as JSON."""
    t1 = read_trace(trace_path)
    traces = [t1]
    if trace2:
        t2 = read_trace(trace2)
        check_compatible(t1, t2)
        traces.append(t2)
    grids = joint_grids(traces[0], traces[-1])
    policy = BinningPolicy(bins)
    data = {
        "bins": bins,
        "traces": [
            {
                "model_id": t.model_id,
                "dataset_id": t.dataset_id,
                "layers": [{"layer": name, **h.to_dict()} for name, h in trace_to_distributions(t, grids, policy)],
            }
            for t in traces
        ],
    }
    _emit_json(data, Path(out) if out else None)


def _select(obs: list[Observation], kinds, levels) -> list[Observation]:
    return [o for o in obs if (not kinds or o.noise_kind in kinds) and (not levels or o.level in levels)]


@cli.command()
@click.option("--obs", "obs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Predictor JSON (stdout if omitted).")
@click.option("--kinds", default=None, help="Comma-separated noise kinds to fit on.")
@click.option("--levels", default=None, help="Comma-separated levels to fit on, e.g. 1,2,6,7.")
@click.option("--per-model", is_flag=True, help="Independent line per model instead of a shared slope.")
def fit(obs_path, out, kinds, levels, per_model):
    """Fit epochs = slope * ARM + intercept per model."""
    obs = _select(read_observations(obs_path), _csv_list(kinds), _csv_list(levels, int))
    if per_model:
        data = {m: p.to_dict() for m, p in fit_per_model(obs).items()}
    else:
        data = fit_predictor(obs).to_dict()
    _emit_json(data, Path(out) if out else None)


@cli.command()
@click.option("--predictor", "predictor_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", required=True)
@click.option("--arm", "arm_value", type=click.FloatRange(min=0), required=True)
@click.option("--anchor-arm", type=click.FloatRange(min=0), default=None,
              help="With --anchor-epochs, place a new model on the shared slope through one observation.")
@click.option("--anchor-epochs", type=click.FloatRange(min=0), default=None)
def predict(predictor_path, model, arm_value, anchor_arm, anchor_epochs):
    """Predicted retraining epochs for one ARM value."""
    with open(predictor_path, encoding="utf-8") as fh:
        pred = Predictor.from_dict(json.load(fh))
    if (anchor_arm is None) != (anchor_epochs is None):
        raise click.UsageError("--anchor-arm and --anchor-epochs go together")
    if anchor_arm is not None:
        pred = anchor_intercept(pred, model, Observation(model, "anchor", 1, anchor_arm, anchor_epochs), overwrite=True)
    elif model not in pred.intercepts:
        raise click.UsageError(f"model {model!r} has no intercept; known: {sorted(pred.intercepts)} "
                               "(use --anchor-arm/--anchor-epochs)")
    click.echo(repr(predict_epochs(pred, model, arm_value)))


@cli.command()
@click.option("--obs", "obs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--group-by", default="model,noise_kind", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV (stdout if omitted).")
def correlate(obs_path, group_by, out):
    """Pearson r and p between ARM and epochs per group."""
    keys = []
    for key in _csv_list(group_by):
        if key not in GROUP_ALIASES:
            raise click.BadParameter(f"unknown group key {key!r}", param_hint="--group-by")
        keys.append(GROUP_ALIASES[key])
    rows = correlation_table(read_observations(obs_path), keys)
    if out:
        write_correlation_table(rows, out, keys)
    else:
        click.echo(",".join([*keys, "n", "r", "p"]))
        for row in rows:
            click.echo(",".join([*row.group, str(row.n), repr(row.r), repr(row.p)]))


@cli.command()
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: <data-dir>/experiment).")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Rerun the plan recorded in a manifest; other plan options are ignored.")
@click.option("--models", default="toy-cnn-a,toy-mlp", show_default=True)
@click.option("--kinds", default=",".join(KINDS), show_default=True)
@click.option("--levels", default="1,2,3,4,5,6,7", show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--target-acc", type=click.FloatRange(0, 1, min_open=True), default=0.85, show_default=True)
@click.option("--lr", type=click.FloatRange(0, min_open=True), default=ExperimentPlan.learning_rate, show_default=True)
@click.option("--max-epochs", type=click.IntRange(min=1), default=ExperimentPlan.max_epochs, show_default=True)
@click.option("--samples", type=click.IntRange(min=10), default=GratingConfig.n_samples, show_default=True)
@click.option("--ladders", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--from-scratch", is_flag=True, help="Retrain from a fresh initialization instead of the base weights.")
@click.option("--no-traces", is_flag=True, help="Do not keep corrupted-data traces on disk.")
@seed_option
@click.pass_obj
def experiment(obj: Context, out, manifest, models, kinds, levels, repeats, target_acc, lr, max_epochs, samples,
               ladders, from_scratch, no_traces, seed):
    """Run or resume the full corrupt, trace, ARM, retrain protocol."""
    out_dir = Path(out) if out else obj.data_dir / "experiment"
    if manifest:
        plan = ExperimentPlan.from_manifest(manifest, out_dir)
    else:
        seed = obj.resolve_seed(seed)
        plan = ExperimentPlan(
            models=_csv_list(models),
            noise_kinds=_csv_list(kinds),
            levels=_csv_list(levels, int),
            target_accuracy=target_acc,
            repeats=repeats,
            seed=seed,
            learning_rate=lr,
            max_epochs=max_epochs,
            warm_start=not from_scratch,
            keep_traces=not no_traces,
            data=GratingConfig(n_samples=samples, seed=seed),
            ladders=load_ladders(ladders),
            output_dir=str(out_dir),
        )
    result = run_experiment(plan, jobs=obj.jobs)
    click.echo((out_dir / "correlation.csv").read_text(encoding="utf-8"), nl=False)
    click.echo(f"wrote {out_dir / 'obs.csv'} in {result['wall_seconds']:.1f} s")


@cli.command()
@click.option("--obs", "obs_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--predictor", "predictor_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Directory (default: <data-dir>/report).")
@click.pass_obj
def report(obj: Context, obs_path, predictor_path, out):
    """Markdown summary, correlation CSV and plot-data JSON."""
    pred = None
    if predictor_path:
        with open(predictor_path, encoding="utf-8") as fh:
            pred = Predictor.from_dict(json.load(fh))
    paths = write_report(read_observations(obs_path), Path(out) if out else obj.data_dir / "report", pred)
    for path in paths.values():
        click.echo(str(path))


DATA_ERRORS = (FormatError, ObsFormatError, ShapeError, GridMismatch, ValueError, KeyError, OSError)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="arm-meter", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE if isinstance(exc, click.UsageError) else exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except ExperimentError as exc:
        click.echo(f"error: experiment stage {exc.stage!r} failed: {exc}", err=True)
        return EXIT_STAGE
    except DATA_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
