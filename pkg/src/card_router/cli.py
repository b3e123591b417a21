"""Command-line entry points.

Exit codes: 0 success, 1 failed check (invalid cards, missed expectation,
replay drift), 2 runtime error, 64 usage error, 74 file error.
"""

from __future__ import annotations

import signal
import sys
from pathlib import Path
from typing import Sequence

import click

from .audit import AuditStore, AuditStoreError, replay
from .backend import BackendError, MalformedScriptError, VlmBackend, load_script
from .calibration import (
    CaseFileError,
    GridTooLargeError,
    load_labeled_cases,
    sweep,
    write_report_csv,
    write_report_json,
)
from .cards import CardError, FileMissingError, load_repository
from .pipeline import DecisionRecord, Thresholds, route
from .remote import RemoteBackend, RemoteConfig
from .service import ServiceConfig, ServiceState, create_app

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64
EXIT_IO = 74

_RUNTIME_ERRORS = (
    CardError,
    BackendError,
    AuditStoreError,
    CaseFileError,
    GridTooLargeError,
    MalformedScriptError,
    ValueError,
)


@click.group()
def cli() -> None:
    """Route medical images to task-specific model cards."""


def _build_backend(
    script: str | None, base_url: str | None, model: str | None
) -> VlmBackend:
    if script and base_url:
        raise click.UsageError("--script and --base-url are mutually exclusive")
    if script:
        return load_script(script)
    if base_url:
        if not model:
            raise click.UsageError("--model is required with --base-url")
        return RemoteBackend(RemoteConfig(base_url=base_url, model=model))
    raise click.UsageError("one of --script or --base-url is required")


def _print_stage_table(record: DecisionRecord) -> None:
    header = ("stage", "top answer", "runner-up", "reason", "verdict")
    rows = [header]
    for outcome in record.stages:
        top, runner = outcome.top2
        rows.append(
            (
                str(outcome.stage),
                f"{top.text} ({top.first_token_prob:.3f})",
                f"{runner.text} ({runner.first_token_prob:.3f})",
                outcome.decision.reason.value,
                outcome.decision.verdict.value,
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    for row in rows:
        click.echo("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    for outcome in record.stages:
        for warning in outcome.warnings:
            click.echo(f"warning (stage {outcome.stage}): {warning}", err=True)


@cli.command("route")
@click.argument("image", required=False, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--case", "case_id", default=None, help="Fixture case id (scripted backends).")
@click.option("--cards", "cards_path", required=True, type=click.Path(dir_okay=False))
@click.option("--script", default=None, type=click.Path(dir_okay=False))
@click.option("--base-url", default=None, help="Chat-completions server, e.g. http://host:8000")
@click.option("--model", default=None, help="Model name to request from the remote server.")
@click.option("--tau1", type=float, default=None)
@click.option("--tau2", type=float, default=None)
@click.option("--tau3", type=float, default=None)
@click.option("--expect", default=None, help="Exit 1 unless the outcome line matches exactly.")
@click.option("--audit", "audit_path", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def route_command(
    ctx: click.Context,
    image: Path | None,
    case_id: str | None,
    cards_path: str,
    script: str | None,
    base_url: str | None,
    model: str | None,
    tau1: float | None,
    tau2: float | None,
    tau3: float | None,
    expect: str | None,
    audit_path: str | None,
) -> None:
    """Run the three-stage workflow for one image (or one scripted case)."""
    if script and not case_id:
        raise click.UsageError("--case is required with --script")
    if base_url and image is None:
        raise click.UsageError("an IMAGE path is required with --base-url")
    backend = _build_backend(script, base_url, model)
    repo = load_repository(cards_path)
    defaults = Thresholds()
    thresholds = Thresholds(
        tau1=tau1 if tau1 is not None else defaults.tau1,
        tau2=tau2 if tau2 is not None else defaults.tau2,
        tau3=tau3 if tau3 is not None else defaults.tau3,
    )
    image_bytes = image.read_bytes() if image is not None else None
    outcome, record = route(image_bytes, case_id, repo, thresholds, backend)
    if audit_path:
        AuditStore(audit_path).append(record)
    _print_stage_table(record)
    if record.justification:
        click.echo(f"justification: {record.justification}")
    click.echo(str(outcome))
    if expect is not None and str(outcome) != expect:
        click.echo(f"expectation failed: wanted {expect!r}", err=True)
        ctx.exit(EXIT_CHECK_FAILED)


@cli.command("validate-cards")
@click.argument("cards_path", type=click.Path(dir_okay=False))
@click.pass_context
def validate_cards_command(ctx: click.Context, cards_path: str) -> None:
    """Check a card file; exit 0 when valid, 1 with a line-anchored reason."""
    try:
        repo = load_repository(cards_path)
    except FileMissingError:
        raise
    except CardError as exc:
        click.echo(f"invalid: {exc}", err=True)
        ctx.exit(EXIT_CHECK_FAILED)
        return
    click.echo(f"ok: {len(repo)} cards, digest {repo.source_digest}")


def _parse_grid(spec: str) -> tuple[tuple[float, ...], tuple[float, ...], tuple[float, ...]]:
    axes = spec.replace("×", "x").split("x")
    if len(axes) != 3:
        raise click.UsageError("--grid needs three axes, e.g. '0.05,0.1x0.3x0.02,0.025'")
    parsed = []
    for axis in axes:
        try:
            values = tuple(float(part) for part in axis.split(",") if part.strip())
        except ValueError:
            raise click.UsageError(f"--grid axis {axis!r} is not a comma-separated float list")
        if not values:
            raise click.UsageError("--grid axes must not be empty")
        parsed.append(values)
    return parsed[0], parsed[1], parsed[2]


@cli.command("calibrate")
@click.option("--cases", "cases_path", required=True, type=click.Path(dir_okay=False))
@click.option("--cards", "cards_path", required=True, type=click.Path(dir_okay=False))
@click.option("--script", default=None, type=click.Path(dir_okay=False))
@click.option("--base-url", default=None)
@click.option("--model", default=None)
@click.option("--grid", "grid_spec", required=True, help="tau1,..xtau2,..xtau3,.. axis values.")
@click.option("--out", "out_prefix", required=True, help="Report path prefix; writes .csv and .json.")
@click.option("--ceiling", type=float, default=0.05, show_default=True)
@click.option("--cap", type=int, default=1000, show_default=True)
@click.option("--strict", is_flag=True, help="Require exact abstention stage and token matches.")
def calibrate_command(
    cases_path: str,
    cards_path: str,
    script: str | None,
    base_url: str | None,
    model: str | None,
    grid_spec: str,
    out_prefix: str,
    ceiling: float,
    cap: int,
    strict: bool,
) -> None:
    """Sweep threshold triples over labeled cases and report the best row."""
    backend = _build_backend(script, base_url, model)
    repo = load_repository(cards_path)
    cases = load_labeled_cases(cases_path)
    grid = _parse_grid(grid_spec)
    report = sweep(
        cases, grid, repo, backend, strict=strict, cap=cap, ceiling=ceiling
    )
    csv_path = f"{out_prefix}.csv"
    json_path = f"{out_prefix}.json"
    write_report_csv(report, csv_path)
    write_report_json(report, json_path)
    click.echo(f"wrote {csv_path} and {json_path} ({len(report.rows)} rows)")
    best = report.best_row
    if best is None:
        click.echo(f"no threshold triple kept the false-selection rate within {ceiling}")
    else:
        click.echo(
            "best: tau1={:.4g} tau2={:.4g} tau3={:.4g} "
            "accuracy={:.4f} false_selection_rate={:.4f}".format(
                best.tau1, best.tau2, best.tau3,
                best.selection_accuracy, best.false_selection_rate,
            )
        )


@cli.command("replay")
@click.option("--store", "store_path", required=True, type=click.Path(dir_okay=False))
@click.option("--id", "request_id", required=True)
@click.option("--cards", "cards_path", required=True, type=click.Path(dir_okay=False))
@click.option("--script", default=None, type=click.Path(dir_okay=False))
@click.option("--base-url", default=None)
@click.option("--model", default=None)
@click.pass_context
def replay_command(
    ctx: click.Context,
    store_path: str,
    request_id: str,
    cards_path: str,
    script: str | None,
    base_url: str | None,
    model: str | None,
) -> None:
    """Re-execute one audited decision and report PASS or DRIFT."""
    backend = _build_backend(script, base_url, model)
    repo = load_repository(cards_path)
    store = AuditStore(store_path)
    result = replay(store, request_id, repo, backend)
    if result.passed:
        click.echo(f"PASS: {request_id} reproduced {result.outcome}")
        return
    if result.template_drift:
        click.echo("DRIFT: prompt templates changed since the record was written", err=True)
    if result.outcome_drift:
        click.echo(
            f"DRIFT: recorded {result.record.outcome}, replay produced {result.outcome}",
            err=True,
        )
    ctx.exit(EXIT_CHECK_FAILED)


@cli.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def serve_command(config_path: str) -> None:
    """Run the HTTP service; SIGHUP reloads the card file in place."""
    import uvicorn

    config = ServiceConfig.from_file(config_path)
    state = ServiceState(config)
    app = create_app(state)

    def _reload(signum: int, frame: object) -> None:
        fresh = state.reload_repository()
        click.echo(f"reloaded {len(fresh)} cards, digest {fresh.source_digest}", err=True)

    signal.signal(signal.SIGHUP, _reload)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


def main(argv: Sequence[str] | None = None) -> int:
    """Console entry point; maps exceptions onto the documented exit codes."""
    try:
        # With standalone_mode off, click hands back ctx.exit codes instead
        # of raising SystemExit.
        result = cli.main(args=argv, prog_name="card-router", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_RUNTIME
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except FileMissingError as exc:
        click.echo(f"file error: {exc}", err=True)
        return EXIT_IO
    except OSError as exc:
        click.echo(f"file error: {exc}", err=True)
        return EXIT_IO
    except _RUNTIME_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
