"""Command-line entry points: run, select, verify, report.

Exit codes: 0 success, 1 verification failure, 2 config problem, 3 backend
failure (a checkpoint of completed trials is written first), 4 selection
infeasible. All outputs are deterministic given config and seed; no
timestamps are written, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Sequence

import click
from filelock import FileLock, Timeout

from . import analytics
from .config import (
    ExperimentConfig,
    MockBackendConfig,
    build_backend,
    build_dataset,
    dump_config,
    followup_config_dict,
    load_config,
)
from .corpus import Dataset
from .engine import (
    EvalRecord,
    read_records,
    run_experiment,
    write_provenance,
    write_records,
)
from .errors import (
    BackendError,
    ConfigError,
    DatasetError,
    EngineAbort,
    OracleGuardError,
    SelectionError,
    ShotscanError,
    TemplateError,
)
from .oracle import verify_estimator
from .seeding import BASELINE_DRAW, derive_rng

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_SELECTION = 4


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path: Path, obj) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_report_files(out_dir: Path, records: Sequence[EvalRecord]) -> None:
    summary = analytics.summarize_curve(records)
    _write_json(out_dir / "curve.json", analytics.curve_json_obj(summary))
    header, rows = analytics.curve_table(summary)
    _write_csv(out_dir / "curve.csv", header, rows)
    header, rows = analytics.trace_table(records)
    _write_csv(out_dir / "traces.csv", header, rows)
    header, rows = analytics.oneshot_table(records)
    _write_csv(out_dir / "oneshot.csv", header, rows)


def _lock(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0.1)
    except Timeout:
        raise ConfigError(
            f"output directory {out_dir} is locked by another invocation"
        ) from None
    return lock


def _apply_overrides(
    config: ExperimentConfig,
    out: str | None,
    seed: int | None,
    backend: str | None,
) -> ExperimentConfig:
    run = config.run
    if seed is not None:
        run = dataclasses.replace(run, seed=seed)
    backend_kind, mock = config.backend_kind, config.mock
    if backend is not None:
        if backend == "remote":
            if config.remote is None:
                raise ConfigError("--backend remote requires remote settings in the config")
            backend_kind = "remote"
        elif backend.startswith("mock:"):
            backend_kind = "mock"
            mock = MockBackendConfig(
                mode=backend.split(":", 1)[1], label=config.mock.label if config.mock else 0
            )
        else:
            raise ConfigError("--backend must be 'remote' or 'mock:<mode>'")
    return dataclasses.replace(
        config,
        run=run,
        backend_kind=backend_kind,
        mock=mock,
        output_dir=Path(out) if out is not None else config.output_dir,
    )


def _close_backend(backend) -> None:
    close = getattr(backend, "close", None)
    if close is not None:
        close()


@click.group()
def main():
    """Measure how in-context example count, order, and selection drive accuracy."""


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Override the output directory.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--backend", default=None, help="Override the backend: 'remote' or 'mock:<mode>'.")
@click.option("--resume", is_flag=True, help="Reuse an existing output directory and its cache.")
def cmd_run(config_path, out, seed, backend, resume):
    """Run the full experiment and write records plus curve/plot tables."""

    def body() -> int:
        config = _apply_overrides(load_config(config_path), out, seed, backend)
        out_dir = config.output_dir
        lock = _lock(out_dir)
        try:
            records_path = out_dir / "records.jsonl"
            if records_path.exists() and not resume:
                raise ConfigError(
                    f"{records_path} already exists; pass --resume to reuse the cache and rerun"
                )
            dataset = build_dataset(config)
            template = config.resolved_template()
            scorer_backend = build_backend(config, dataset, template)
            cache_path = out_dir / "cache.jsonl" if config.run.cache else None
            try:
                artifact = run_experiment(
                    config.run,
                    dataset,
                    scorer_backend,
                    template,
                    cache_path=cache_path,
                    extra_provenance={"experiment_config": config.to_dict()},
                )
            except EngineAbort as exc:
                checkpoint = out_dir / "checkpoint.records.jsonl"
                write_records(checkpoint, exc.partial_records)
                click.echo(f"backend error: {exc}", err=True)
                click.echo(
                    f"checkpoint with {len(exc.partial_records)} records written to "
                    f"{checkpoint}; rerun with --resume to continue from the cache",
                    err=True,
                )
                return EXIT_BACKEND
            finally:
                _close_backend(scorer_backend)
            write_records(records_path, artifact.records)
            write_provenance(out_dir / "provenance.json", artifact.provenance)
            _write_report_files(out_dir, artifact.records)
            click.echo(f"wrote {len(artifact.records)} records to {records_path}")
            return EXIT_OK
        finally:
            lock.release()

    sys.exit(_dispatch(body))


@main.command("select")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--records", "records_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Override the output directory.")
@click.option("--mode", default=None, type=click.Choice(analytics.MU_MODES))
def cmd_select(config_path, records_path, out, mode):
    """Z-score the run's exemplars and emit high/low/baseline follow-up configs."""

    def body() -> int:
        config = _apply_overrides(load_config(config_path), out, None, None)
        out_dir = config.output_dir
        lock = _lock(out_dir)
        try:
            records = read_records(records_path)
            report = analytics.zscore_report(
                records,
                mode=mode or config.analytics.mu_mode,
                threshold=config.analytics.z_threshold,
                set_size=config.analytics.set_size,
            )
            dataset = build_dataset(config)
            baseline = _baseline_ids(dataset, config.analytics.set_size, config.run.seed)

            report_obj = analytics.zscore_json_obj(report)
            report_obj["baseline_set"] = list(baseline)
            report_obj["baseline_seed"] = config.run.seed
            _write_json(out_dir / "zscore_report.json", report_obj)
            header, rows = analytics.zscore_table(report)
            _write_csv(out_dir / "zscores.csv", header, rows)

            for name, ids in (
                ("high", report.high_set),
                ("low", report.low_set),
                ("baseline", baseline),
            ):
                dump_config(
                    followup_config_dict(config, ids, f"followup_{name}"),
                    out_dir / f"config_{name}.yaml",
                )
            click.echo(f"high set: {', '.join(report.high_set)}")
            click.echo(f"low set: {', '.join(report.low_set)}")
            click.echo(f"baseline set: {', '.join(baseline)}")
            return EXIT_OK
        finally:
            lock.release()

    sys.exit(_dispatch(body))


def _baseline_ids(dataset: Dataset, set_size: int, seed: int) -> tuple[str, ...]:
    if set_size > len(dataset.train):
        raise SelectionError(
            f"baseline of {set_size} exceeds train split of {len(dataset.train)}"
        )
    rng = derive_rng(seed, BASELINE_DRAW)
    idx = rng.choice(len(dataset.train), size=set_size, replace=False)
    return tuple(dataset.train[i].id for i in idx)


@main.command("verify")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Override the output directory.")
@click.option("--tolerance", type=float, default=None, help="Fixed error bound instead of 3 standard errors.")
def cmd_verify(config_path, out, tolerance):
    """Check the Monte Carlo estimator against the exhaustive oracle."""

    def body() -> int:
        config = _apply_overrides(load_config(config_path), out, None, None)
        if config.backend_kind != "mock":
            raise ConfigError("verify requires a deterministic mock backend")
        out_dir = config.output_dir
        lock = _lock(out_dir)
        try:
            dataset = build_dataset(config)
            template = config.resolved_template()
            backend = build_backend(config, dataset, template)
            report = verify_estimator(
                config.run, dataset, backend, template, tolerance=tolerance
            )
            _write_json(out_dir / "verify_report.json", report.to_json_obj())
            for row in report.rows:
                click.echo(
                    f"trial {row.trial} k={row.k}: estimate {row.estimate:.6f} "
                    f"exact {row.exact:.6f} |err| {row.abs_error:.6f} "
                    f"bound {row.bound:.6f} {'ok' if row.passed else 'FAIL'}"
                )
            click.echo(f"max abs error {report.max_abs_error:.6f}")
            click.echo("verification PASSED" if report.passed else "verification FAILED")
            return EXIT_OK if report.passed else EXIT_VERIFY_FAILED
        finally:
            lock.release()

    sys.exit(_dispatch(body))


@main.command("report")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, help="Directory for the plot-data tables.")
def cmd_report(records_path, out):
    """Recompute curve, trace, and one-shot scatter tables from a records file."""

    def body() -> int:
        out_dir = Path(out)
        lock = _lock(out_dir)
        try:
            records = read_records(records_path)
            if not records:
                raise ConfigError(f"{records_path}: no records")
            _write_report_files(out_dir, records)
            click.echo(f"wrote report tables to {out_dir}")
            return EXIT_OK
        finally:
            lock.release()

    sys.exit(_dispatch(body))


def _dispatch(body) -> int:
    try:
        return body()
    except (ConfigError, DatasetError, TemplateError, OracleGuardError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except SelectionError as exc:
        click.echo(f"selection infeasible: {exc}", err=True)
        return EXIT_SELECTION
    except BackendError as exc:
        click.echo(f"backend error: {exc}", err=True)
        return EXIT_BACKEND
    except ShotscanError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG


if __name__ == "__main__":
    main()
