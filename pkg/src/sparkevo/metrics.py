"""Search-dynamics metrics computed from trace files.

A trace is JSONL: record 0 is the evaluated seed, every following record is
one proposal attempt.  Best-so-far is tracked over evaluated (valid)
candidates only; the cumulative valid rate counts attempts whose proposals
passed feasibility and entered scoring; entanglement is aggregated over
attempts with a classifiable child.  All series are raw cumulative values, no
smoothing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .feasibility import FailureType

VALID_OUTCOMES = ("PASS", "CULLED")
FAILURE_COLUMNS = tuple(f.value for f in FailureType)


class ReportError(Exception):
    """Corrupt or unusable trace input."""


def round_half_up(value: float, decimals: int = 1) -> float:
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(str(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def read_trace(path: str | Path) -> list[dict]:
    records: list[dict] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise ReportError(f"{path}: corrupt trace line {number}: {exc}") from exc
            if not isinstance(record, dict) or "iteration" not in record:
                raise ReportError(f"{path}: corrupt trace line {number}: not an attempt record")
            records.append(record)
    return records


@dataclass
class AttemptRow:
    attempt: int
    outcome: str
    best_so_far: float | None
    best_so_far_macs: int | None
    cumulative_valid_rate: float
    cumulative_entanglement_rate: float | None
    failure_counts: dict[str, int]


@dataclass
class MetricsSeries:
    rows: list[AttemptRow] = field(default_factory=list)
    seed_fitness: float | None = None

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class TraceMetrics:
    series: MetricsSeries
    best_fitness: float | None
    best_attempt: int | None
    evals_to_best: int | None
    evaluations_used: int
    attempts: int
    no_valid: bool

    def summary(self, reference_evals: int | None = None) -> dict:
        final_valid = self.series.rows[-1].cumulative_valid_rate if self.series.rows else 0.0
        final_ent = (
            self.series.rows[-1].cumulative_entanglement_rate if self.series.rows else None
        )
        summary = {
            "best_fitness": self.best_fitness,
            "best_attempt": self.best_attempt,
            "evaluations_to_best": self.evals_to_best,
            "evaluations_used": self.evaluations_used,
            "attempts": self.attempts,
            "final_valid_rate": final_valid,
            "final_entanglement_rate": final_ent,
            "no_valid_candidates": self.no_valid,
            "efficiency": None,
        }
        if reference_evals is not None and self.evals_to_best:
            ratio = reference_evals / self.evals_to_best
            rounded = round_half_up(ratio, 1)
            summary["efficiency"] = {
                "reference_evaluations": reference_evals,
                "evaluations_to_best": self.evals_to_best,
                "ratio": ratio,
                "label": f"{rounded:.1f}×",
            }
        return summary


def compute_metrics(records: list[dict]) -> TraceMetrics:
    """Metrics as a pure function of the trace records."""
    seed = next((r for r in records if r["iteration"] == 0), None)
    attempts = [r for r in records if r["iteration"] >= 1]

    best: float | None = None
    best_macs: int | None = None
    best_attempt: int | None = None
    evals_to_best: int | None = None
    n_eval = 0
    if seed is not None and seed.get("fitness") is not None:
        n_eval = 1
        best = seed["fitness"]
        best_macs = seed.get("macs")
        best_attempt = 0
        evals_to_best = 1

    valid = 0
    entangled = 0
    classified = 0
    failure_counts = {name: 0 for name in FAILURE_COLUMNS}
    rows: list[AttemptRow] = []

    for index, record in enumerate(attempts, start=1):
        outcome = record.get("outcome")
        if outcome in VALID_OUTCOMES:
            valid += 1
        failure = record.get("failure_type")
        if failure in failure_counts:
            failure_counts[failure] += 1
        if record.get("entangled") is not None:
            classified += 1
            if record["entangled"]:
                entangled += 1
        fitness = record.get("fitness")
        if outcome == "PASS" and fitness is not None:
            n_eval += 1
            macs = record.get("macs")
            if best is None or fitness > best:
                best = fitness
                best_macs = macs
                best_attempt = record["iteration"]
                evals_to_best = n_eval
            elif fitness == best and macs is not None and (best_macs is None or macs < best_macs):
                best_macs = macs
        rows.append(
            AttemptRow(
                attempt=record["iteration"],
                outcome=outcome,
                best_so_far=best,
                best_so_far_macs=best_macs,
                cumulative_valid_rate=valid / index,
                cumulative_entanglement_rate=(entangled / classified) if classified else None,
                failure_counts=dict(failure_counts),
            )
        )

    series = MetricsSeries(rows=rows, seed_fitness=seed.get("fitness") if seed else None)
    return TraceMetrics(
        series=series,
        best_fitness=best,
        best_attempt=best_attempt,
        evals_to_best=evals_to_best,
        evaluations_used=n_eval,
        attempts=len(attempts),
        no_valid=best is None,
    )


def write_series_csv(series: MetricsSeries, path: str | Path) -> None:
    header = [
        "attempt",
        "outcome",
        "best_so_far",
        "best_so_far_macs",
        "cumulative_valid_rate",
        "cumulative_entanglement_rate",
    ] + [f"fail_{name}" for name in FAILURE_COLUMNS]
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in series.rows:
            writer.writerow(
                [
                    row.attempt,
                    row.outcome,
                    "" if row.best_so_far is None else f"{row.best_so_far:.6f}",
                    "" if row.best_so_far_macs is None else row.best_so_far_macs,
                    f"{row.cumulative_valid_rate:.6f}",
                    ""
                    if row.cumulative_entanglement_rate is None
                    else f"{row.cumulative_entanglement_rate:.6f}",
                ]
                + [row.failure_counts[name] for name in FAILURE_COLUMNS]
            )


def aggregate_traces(all_metrics: list[TraceMetrics]) -> list[dict]:
    """Mean and min-max band across runs, truncated to the shortest trace."""
    if not all_metrics:
        return []
    length = min(len(m.series) for m in all_metrics)
    rows: list[dict] = []
    for i in range(length):
        bsf = [m.series.rows[i].best_so_far for m in all_metrics]
        bsf = [b for b in bsf if b is not None]
        valid = [m.series.rows[i].cumulative_valid_rate for m in all_metrics]
        ent = [
            m.series.rows[i].cumulative_entanglement_rate
            for m in all_metrics
            if m.series.rows[i].cumulative_entanglement_rate is not None
        ]
        rows.append(
            {
                "attempt": all_metrics[0].series.rows[i].attempt,
                "mean_best_so_far": sum(bsf) / len(bsf) if bsf else None,
                "min_best_so_far": min(bsf) if bsf else None,
                "max_best_so_far": max(bsf) if bsf else None,
                "mean_valid_rate": sum(valid) / len(valid),
                "min_valid_rate": min(valid),
                "max_valid_rate": max(valid),
                "mean_entanglement_rate": sum(ent) / len(ent) if ent else None,
            }
        )
    return rows


def write_aggregate_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    header = list(rows[0].keys())
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
