"""
CLI for rest-adapt.

Drives every stage of the subject-adaptive transfer pipeline from one run
configuration file (JSON or YAML).  Relative paths in the file are resolved
against its directory; every command that writes artifacts also writes the
resolved config snapshot into the output directory.

Entry point: `main()` (registered as `rest-adapt` console script); `run(argv)`
returns the exit code instead of exiting.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

import functools
import logging
from collections.abc import Callable
from typing import Any, TypeVar

import click

from rest_adapt import __version__
from rest_adapt.cli_format import (eval_to_dict, format_ablation_table, format_eval, format_gradcheck, format_json, format_report_json,
                                   format_report_table, format_sweep_table, gradcheck_to_dict)
from rest_adapt.config import ConfigManager, RunConfig
from rest_adapt.errors import ConfigError, DataError, GradientError, RestAdaptError
from rest_adapt.kinds import CalibInit, CalibMethod
from rest_adapt.pipeline import TransferPipeline
from rest_adapt.synthgen import gen_dataset

F = TypeVar("F", bound=Callable[..., Any])

GRADCHECK_TOLERANCE = 1e-4


def setup_logging(verbose: bool) -> None:
    """
    Set up logging configuration.

    `verbose` enables DEBUG level logging, otherwise INFO level is used.
    """
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")


def _report_error(exc: RestAdaptError) -> None:
    click.echo(f"Error: {exc.message}", err=True)
    for violation in getattr(exc, "violations", []):
        click.echo(f"  - {violation}", err=True)


def handle_errors(func: F) -> F:
    """
    Translate package errors into a message on stderr and the error's exit code.

    Operating-system errors that escape the package (unreadable datasets,
    unwritable output directories) are reported as data errors.
    """

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except RestAdaptError as exc:
            _report_error(exc)
            click.get_current_context().exit(exc.exit_code)
        except OSError as exc:
            _report_error(DataError(f"{exc.filename or 'I/O'}: {exc.strerror or exc}"))
            click.get_current_context().exit(DataError.exit_code)

    return wrapper  # type: ignore[return-value]


def load_config(ctx: click.Context, config_path: str | None) -> RunConfig:
    """
    Load configuration and store it in context.

    Loads from `config_path` if specified, otherwise uses the defaults.
    """
    manager = ConfigManager(config_path)
    config = manager.load()
    ctx.ensure_object(dict)
    ctx.obj["config"] = config
    ctx.obj["config_manager"] = manager
    return config


def get_pipeline(ctx: click.Context) -> TransferPipeline:
    """
    Pipeline bound to the loaded config; created once per invocation.
    """
    if "pipeline" not in ctx.obj:
        ctx.obj["pipeline"] = TransferPipeline(ctx.obj["config"], workers=ctx.obj["workers"], config_manager=ctx.obj["config_manager"])
    return ctx.obj["pipeline"]


def resolve_targets(pipeline: TransferPipeline, target: tuple[str, ...], all_subjects: bool) -> list[str]:
    """
    `--target` values (validated against the dataset), else the configured targets / every subject.
    """
    if target and all_subjects:
        raise ConfigError("--target and --all-subjects are mutually exclusive")
    if not target:
        return pipeline.targets(all_subjects)
    subjects = pipeline.manifest.subjects
    unknown = [t for t in target if t not in subjects]
    if unknown:
        raise DataError(f"Unknown target subject(s) {unknown}; dataset has {', '.join(subjects)}")
    return list(target)


def target_options(func: F) -> F:
    func = click.option("--all-subjects", is_flag=True, default=False, help="Every subject in turn (full leave-one-subject-out)")(func)
    func = click.option("--target", "-t", multiple=True, help="Target subject id (repeatable; default: config `targets`)")(func)
    return func


json_option = click.option("--json", "as_json", is_flag=True, default=False, help="Output as JSON")


@click.group()
@click.version_option(version=__version__, prog_name="rest-adapt")
@click.option("--config", "-C", "config_path", type=click.Path(), default=None, help="Path of the run configuration (JSON or YAML)")
@click.option("--workers", "-w", type=click.IntRange(min=1), default=1, envvar="REST_ADAPT_WORKERS", show_envvar=True,
              help="Worker threads for preprocessing, synthesis and calibration")
@click.option("--verbose", "-v", is_flag=True, default=False, help="Enable verbose logging")
@click.pass_context
@handle_errors
def main(ctx: click.Context, config_path: str | None, workers: int, verbose: bool) -> None:
    """
    rest-adapt - subject-adaptive transfer learning for cross-subject EEG.

    Stage 1 trains a disentangled encoder on every subject but the target,
    stage 2 turns the target's resting-state signals into class-conditioned
    calibration signals, stage 3 fine-tunes on them.
    """
    setup_logging(verbose)
    load_config(ctx, config_path)
    ctx.obj["workers"] = workers


@main.command()
@click.pass_context
@handle_errors
def validate(ctx: click.Context) -> None:
    """Print the normalized configuration with every default filled in."""
    click.echo(format_json(ctx.obj["config"].model_dump(mode="json")))


@main.command()
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Pack directory (default: <output_dir>/synthetic)")
@click.pass_context
@handle_errors
def synth(ctx: click.Context, out_dir: str | None) -> None:
    """Generate the synthetic dataset described by the `synth` section."""
    config: RunConfig = ctx.obj["config"]
    if config.synth is None:
        raise ConfigError("synth: section is required to generate a synthetic dataset")
    pipeline = get_pipeline(ctx)
    directory = out_dir if out_dir is not None else pipeline.dataset_dir
    manifest = gen_dataset(config.synth, directory, workers=ctx.obj["workers"])
    click.echo(f"Wrote {len(manifest.trials)} trials of {len(manifest.subjects)} subjects to {directory}")


@main.command()
@target_options
@click.option("--force", is_flag=True, default=False, help="Retrain even when a matching checkpoint exists")
@click.pass_context
@handle_errors
def train(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, force: bool) -> None:
    """Stage 1: train the encoder on every subject except the target."""
    pipeline = get_pipeline(ctx)
    pipeline.config_manager.save_snapshot(pipeline.config, pipeline.output_dir)
    for subject in resolve_targets(pipeline, target, all_subjects):
        result = pipeline.stage1(subject, reuse=not force)
        click.echo(f"{subject}: selected epoch {result.selected_epoch}, checkpoint {pipeline.subject_dir(subject) / pipeline.STAGE1_CKPT}")


@main.command()
@target_options
@click.option("--method", type=click.Choice([m.value for m in CalibMethod]), default=None, help="Synthesis objective override")
@click.option("--init", "init", type=click.Choice([i.value for i in CalibInit]), default=None, help="Initialization override")
@click.pass_context
@handle_errors
def calibrate(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, method: str | None, init: str | None) -> None:
    """Stage 2: calibrate the target's resting-state signals towards every class."""
    pipeline = get_pipeline(ctx)
    pipeline.config_manager.save_snapshot(pipeline.config, pipeline.output_dir)
    for subject in resolve_targets(pipeline, target, all_subjects):
        calibrated = pipeline.calibrate(subject, method=CalibMethod(method) if method else None, init=CalibInit(init) if init else None)
        directory = pipeline.save_calibration(subject, calibrated)
        click.echo(f"{subject}: {len(calibrated)} calibrated signals ({len(calibrated.flagged)} flagged), "
                   f"class counts {calibrated.class_counts()}, saved to {directory}")


@main.command()
@target_options
@click.pass_context
@handle_errors
def adapt(ctx: click.Context, target: tuple[str, ...], all_subjects: bool) -> None:
    """Stage 3: fine-tune the stage-1 model on the calibrated signals."""
    pipeline = get_pipeline(ctx)
    pipeline.config_manager.save_snapshot(pipeline.config, pipeline.output_dir)
    for subject in resolve_targets(pipeline, target, all_subjects):
        result = pipeline.adapt(subject)
        trace = " -> ".join(f"{v:.4f}" for v in (result.loss_trace[0], result.loss_trace[-1]))
        click.echo(f"{subject}: calibrated CE {trace}, checkpoint {pipeline.subject_dir(subject) / pipeline.ADAPTED_CKPT}")


@main.command(name="eval")
@target_options
@json_option
@click.pass_context
@handle_errors
def eval_cmd(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, as_json: bool) -> None:
    """Accuracy of the stage-1 and adapted models on the target's task trials."""
    pipeline = get_pipeline(ctx)
    rows = []
    for subject in resolve_targets(pipeline, target, all_subjects):
        baseline, adapted = pipeline.evaluate_target(subject)
        rows.append({
            "baseline": eval_to_dict(subject, baseline),
            "adapted": eval_to_dict(subject, adapted) if adapted is not None else None,
        })
        if not as_json:
            click.echo(format_eval(subject, baseline, label="stage-1 accuracy"))
            if adapted is not None:
                click.echo(format_eval(subject, adapted, label="adapted accuracy"))
            else:
                click.echo(f"{subject}: no adapted checkpoint (run `rest-adapt adapt` first)")
    if as_json:
        click.echo(format_json(rows))


@main.command()
@target_options
@json_option
@click.pass_context
@handle_errors
def pipeline(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, as_json: bool) -> None:
    """Train, calibrate, adapt and evaluate each target subject; writes report.json / report.tsv."""
    runner = get_pipeline(ctx)
    report = runner.run(resolve_targets(runner, target, all_subjects))
    click.echo(format_report_json(report) if as_json else format_report_table(report))


@main.command()
@target_options
@click.option("--fractions", default=None, help="Comma-separated resting-signal fractions (default: config `sweep_fractions`)")
@json_option
@click.pass_context
@handle_errors
def sweep(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, fractions: str | None, as_json: bool) -> None:
    """Adaptation accuracy against the fraction of resting-state signals used."""
    pipeline = get_pipeline(ctx)
    chosen = None
    if fractions:
        try:
            chosen = [float(f) for f in fractions.split(",") if f.strip()]
        except ValueError as exc:
            raise ConfigError(f"--fractions: expected comma-separated numbers, got {fractions!r}") from exc
        if any(not 0 < f <= 1 for f in chosen):
            raise ConfigError(f"--fractions: values must lie in (0, 1], got {chosen}")
    results = {}
    for subject in resolve_targets(pipeline, target, all_subjects):
        results[subject] = pipeline.sweep(subject, chosen)
        if not as_json:
            click.echo(format_sweep_table(subject, results[subject]))
    if as_json:
        click.echo(format_json({s: [r.model_dump() for r in rows] for s, rows in results.items()}))


@main.command()
@target_options
@json_option
@click.pass_context
@handle_errors
def ablation(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, as_json: bool) -> None:
    """Compare synthesis objectives and initializations on one stage-1 model."""
    pipeline = get_pipeline(ctx)
    results = {}
    for subject in resolve_targets(pipeline, target, all_subjects):
        results[subject] = pipeline.ablation(subject)
        if not as_json:
            click.echo(format_ablation_table(subject, results[subject]))
    if as_json:
        click.echo(format_json({s: [r.model_dump() for r in rows] for s, rows in results.items()}))


@main.command(name="export-features")
@target_options
@json_option
@click.pass_context
@handle_errors
def export_features(ctx: click.Context, target: tuple[str, ...], all_subjects: bool, as_json: bool) -> None:
    """Write task features and subject embeddings of calibrated and real trials to features.tsv."""
    pipeline = get_pipeline(ctx)
    metrics = {}
    for subject in resolve_targets(pipeline, target, all_subjects):
        export = pipeline.export(subject)
        metrics[subject] = export.metrics.as_dict()
        if not as_json:
            click.echo(f"{subject}: {len(export.rows)} rows -> {pipeline.subject_dir(subject) / 'features.tsv'}")
            for name, value in metrics[subject].items():
                click.echo(f"  {name:<24} {value:.4f}")
    if as_json:
        click.echo(format_json(metrics))


@main.command()
@click.option("--param-coords", type=click.IntRange(min=1), default=200, help="Parameter coordinates to check")
@click.option("--input-coords", type=click.IntRange(min=1), default=100, help="Input coordinates to check")
@click.option("--tolerance", type=float, default=GRADCHECK_TOLERANCE, help="Maximum accepted relative error")
@json_option
@click.pass_context
@handle_errors
def gradcheck(ctx: click.Context, param_coords: int, input_coords: int, tolerance: float, as_json: bool) -> None:
    """Compare analytic gradients of the training and calibration objectives with finite differences."""
    reports = get_pipeline(ctx).gradcheck(n_param_coords=param_coords, n_input_coords=input_coords)
    if as_json:
        click.echo(format_json([gradcheck_to_dict(r, tolerance) for r in reports]))
    else:
        click.echo(format_gradcheck(reports, tolerance))
    worst = max(r.max_rel_error for r in reports)
    if worst > tolerance:
        raise GradientError(f"Maximum relative gradient error {worst:.3e} exceeds tolerance {tolerance:g}")


def run(argv: list[str] | None = None) -> int:
    """
    Invoke the CLI with `argv` and return the process exit code.
    """
    try:
        result = main.main(args=argv, prog_name="rest-adapt", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    main()
