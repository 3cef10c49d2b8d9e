"""Command-line entry points: run, report, audit, simulate, validate-config,
plus a reference synthetic evaluator speaking the subprocess JSON contract."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, load_config
from .edit_locality import check_factor_local, parse_failure_verdict
from .evaluator import SyntheticTask, synthetic_score
from .metrics import (
    ReportError,
    aggregate_traces,
    compute_metrics,
    read_trace,
    write_aggregate_csv,
    write_series_csv,
)
from .program_model import (
    Factor,
    ProgramError,
    TagConfig,
    TaggedProgram,
    parse_factor_token,
)
from .search import EXIT_CONFIG, RunAbort
from .simulate import mode_gap, validity_table

logger = logging.getLogger(__name__)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool) -> None:
    """Factor-scoped LLM program evolution engine."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _load_config_or_exit(config_path: str):
    try:
        return load_config(config_path)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)


@main.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output directory.")
@click.option("--trace-out", default=None, type=click.Path(dir_okay=False), help="Override trace path.")
def cmd_run(config_path: str, resume: bool, trace_out: str | None) -> None:
    """Execute one search run from a TOML config."""
    from .config import build_runner

    config = _load_config_or_exit(config_path)
    if not config.run.seed_program:
        click.echo("invalid configuration:\n  run.seed_program: required for run", err=True)
        sys.exit(EXIT_CONFIG)
    seed_path = Path(config.run.seed_program)
    if not seed_path.exists():
        click.echo(f"invalid configuration:\n  run.seed_program: no such file {seed_path}", err=True)
        sys.exit(EXIT_CONFIG)
    out_dir = Path(config.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = Path(trace_out) if trace_out else out_dir / "trace.jsonl"
    checkpoint_path = out_dir / "checkpoint.json"

    runner = build_runner(config, trace_path, checkpoint_path)
    try:
        seed_text = seed_path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        click.echo(f"seed program is not valid UTF-8: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        result = runner.run(seed_text, resume=resume)
    except RunAbort as exc:
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(exc.exit_code)

    click.echo(f"stopped on {result.stop_reason}: {result.attempts} attempts, {result.n_eval} evaluations")
    if result.best is not None:
        best = result.best
        click.echo(
            "best elite: fitness="
            f"{best.descriptor.fitness:.4f} macs={best.descriptor.macs} digest={best.digest[:12]}"
        )
    click.echo(f"trace: {result.trace_path}")


@main.command("report")
@click.argument("traces", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--reference-evals", type=int, default=None, help="Reference evaluation count for the efficiency ratio.")
@click.option("--out-dir", default="report_out", type=click.Path(file_okay=False))
def cmd_report(traces: tuple[str, ...], reference_evals: int | None, out_dir: str) -> None:
    """Emit metric series (CSV) and a JSON summary from one or more traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_metrics = []
    summaries = []
    try:
        for trace in traces:
            metrics = compute_metrics(read_trace(trace))
            all_metrics.append(metrics)
            series_path = out / f"{Path(trace).stem}_series.csv"
            write_series_csv(metrics.series, series_path)
            summary = metrics.summary(reference_evals)
            summary["trace"] = str(trace)
            summaries.append(summary)
    except ReportError as exc:
        click.echo(f"report aborted: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    payload: dict = {"runs": summaries}
    if len(all_metrics) > 1:
        aggregate = aggregate_traces(all_metrics)
        write_aggregate_csv(aggregate, out / "aggregate_series.csv")
        bests = [s["best_fitness"] for s in summaries if s["best_fitness"] is not None]
        payload["aggregate"] = {
            "runs": len(all_metrics),
            "mean_best_fitness": sum(bests) / len(bests) if bests else None,
        }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")

    for summary in summaries:
        line = (
            f"{summary['trace']}: best={summary['best_fitness']} "
            f"at attempt {summary['best_attempt']} "
            f"({summary['evaluations_used']} evaluations used)"
        )
        if summary["no_valid_candidates"]:
            line = f"{summary['trace']}: no valid candidates"
        click.echo(line)
        if summary["efficiency"]:
            eff = summary["efficiency"]
            click.echo(
                f"efficiency: {eff['reference_evaluations']}/{eff['evaluations_to_best']} "
                f"= {eff['label']}"
            )
    click.echo(f"summary: {summary_path}")


@main.command("audit")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSONL manifest: one {parent, child, factor?} object per line.")
@click.option("--out", "out_path", default="verdicts.jsonl", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Run config supplying tag strings (defaults otherwise).")
def cmd_audit(pairs_path: str, out_path: str, config_path: str | None) -> None:
    """Locality-audit a corpus of parent/child file pairs."""
    tags = _load_config_or_exit(config_path).tags if config_path else TagConfig()
    total = 0
    entangled = 0
    with Path(pairs_path).open("r", encoding="utf-8") as manifest, Path(out_path).open(
        "w", encoding="utf-8"
    ) as sink:
        for number, line in enumerate(manifest, start=1):
            if not line.strip():
                continue
            try:
                pair = json.loads(line)
            except ValueError as exc:
                click.echo(f"audit aborted: bad manifest line {number}: {exc}", err=True)
                sys.exit(EXIT_CONFIG)
            factor = None
            if pair.get("factor"):
                factor = parse_factor_token(pair["factor"])
            try:
                parent = TaggedProgram.load(pair["parent"], tags)
                child = TaggedProgram.load(pair["child"], tags)
                verdict = check_factor_local(parent, child, factor)
            except ProgramError:
                verdict = parse_failure_verdict()
            total += 1
            if verdict.entangled:
                entangled += 1
            sink.write(
                json.dumps(
                    {
                        "pair": number,
                        "parent": pair["parent"],
                        "child": pair["child"],
                        "factor": factor.value if factor else None,
                        "is_factor_local": verdict.is_factor_local,
                        "touched_regions": sorted(verdict.touched_regions),
                        "entangled": verdict.entangled,
                        "parse_failure": verdict.parse_failure,
                    }
                )
                + "\n"
            )
    rate = entangled / total if total else 0.0
    click.echo(f"pairs: {total} entangled: {entangled} entanglement_rate: {rate:.4f}")
    click.echo(f"verdicts: {out_path}")


@main.command("simulate")
@click.option("--p-v", "p_v", default=0.8, show_default=True, help="Per-scope validity probability.")
@click.option("--trials", default=2000, show_default=True)
@click.option("--k", "ks", multiple=True, type=int, help="Scope counts for the validity table (default 1 and 2).")
@click.option("--seed", default=0, show_default=True)
@click.option("--mode-gap", "with_mode_gap", is_flag=True, help="Also run full factor-scoped vs free-form searches.")
@click.option("--attempts", default=100, show_default=True)
@click.option("--seeds", default="1,2,3,4,5", show_default=True, help="Comma-separated seeds for the mode-gap runs.")
@click.option("--entangle-prob", default=0.5, show_default=True)
@click.option("--out-dir", default="sim_out", type=click.Path(file_okay=False), show_default=True)
def cmd_simulate(
    p_v: float,
    trials: int,
    ks: tuple[int, ...],
    seed: int,
    with_mode_gap: bool,
    attempts: int,
    seeds: str,
    entangle_prob: float,
    out_dir: str,
) -> None:
    """Stochastic editor simulations: validity table and optional mode gap."""
    if not 0.0 < p_v <= 1.0:
        click.echo("--p-v must be in (0, 1]", err=True)
        sys.exit(EXIT_CONFIG)
    if trials < 1 or attempts < 1:
        click.echo("--trials and --attempts must be >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    ks = ks or (1, 2)
    if any(k < 1 for k in ks):
        click.echo("--k values must be >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = validity_table(p_v=p_v, ks=tuple(ks), trials=trials, seed=seed)
    click.echo(f"{'k':>3} {'measured':>10} {'p_v^k':>10}")
    for row in rows:
        click.echo(f"{row.k:>3} {row.measured:>10.4f} {row.analytic:>10.4f}")
    table_path = out / "validity_table.json"
    table_path.write_text(
        json.dumps(
            [
                {"k": r.k, "trials": r.trials, "measured": r.measured, "analytic": r.analytic}
                for r in rows
            ],
            indent=2,
        ),
        encoding="utf-8",
    )
    click.echo(f"table: {table_path}")

    if with_mode_gap:
        seed_list = tuple(int(s) for s in seeds.split(",") if s.strip())
        results = mode_gap(
            p_v=p_v,
            entangle_prob=entangle_prob,
            attempts=attempts,
            seeds=seed_list,
            out_dir=out,
        )
        click.echo(f"{'seed':>5} {'scoped':>8} {'freeform':>9} {'gap':>7}")
        for result in results:
            click.echo(
                f"{result.seed:>5} {result.spark_valid_rate:>8.3f} "
                f"{result.freeform_valid_rate:>9.3f} {result.gap:>7.3f}"
            )
        gap_path = out / "mode_gap.json"
        gap_path.write_text(
            json.dumps(
                [
                    {
                        "seed": r.seed,
                        "spark_valid_rate": r.spark_valid_rate,
                        "freeform_valid_rate": r.freeform_valid_rate,
                        "gap": r.gap,
                        "spark_best": r.spark_best,
                        "freeform_best": r.freeform_best,
                    }
                    for r in results
                ],
                indent=2,
            ),
            encoding="utf-8",
        )
        click.echo(f"mode gap: {gap_path}")


@main.command("validate-config")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def cmd_validate_config(config_path: str) -> None:
    """Parse and validate a run config; list every invalid field."""
    _load_config_or_exit(config_path)
    click.echo("configuration ok")


@main.command("synthetic-eval")
@click.argument("program", type=click.Path(exists=True, dir_okay=False))
@click.option("--stage", type=click.Choice(["prelim", "full"]), default="full", show_default=True)
@click.option("--target-token", default="gate", show_default=True)
@click.option("--per-hit", default=0.04, show_default=True)
@click.option("--line-cap", default=60, show_default=True)
@click.option("--line-penalty", default=0.01, show_default=True)
@click.option("--macs-per-line", default=12000, show_default=True)
@click.option("--jitter", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synthetic_eval(
    program: str,
    stage: str,
    target_token: str,
    per_hit: float,
    line_cap: int,
    line_penalty: float,
    macs_per_line: int,
    jitter: float,
    seed: int,
) -> None:
    """Reference evaluator command implementing the JSON-on-stdout contract."""
    task = SyntheticTask(
        target_token=target_token,
        per_hit=per_hit,
        line_cap=line_cap,
        line_penalty=line_penalty,
        macs_per_line=macs_per_line,
        jitter=jitter,
        seed=seed,
    )
    try:
        parsed = TaggedProgram.load(program, TagConfig())
    except ProgramError as exc:
        click.echo(json.dumps({"status": "error", "type": f"parse: {exc}"}))
        return
    descriptor = synthetic_score(parsed, task)
    payload: dict = {
        "status": "ok",
        "fitness": descriptor.fitness,
        "descriptors": {"macs": descriptor.macs},
    }
    if descriptor.params is not None:
        payload["descriptors"]["params"] = descriptor.params
    click.echo(json.dumps(payload))


if __name__ == "__main__":
    main()
