"""Search loop: budget accounting, proposal buffer, stepping, archive updates.

The loop evaluates the seed first, then repeats: sample parent and
inspirations, build context, step according to the run mode, check
feasibility, optionally cascade-gate, evaluate, update the archive, migrate on
schedule.  One trace record is emitted per attempt; only completed evaluations
consume budget.  Attempt cap and evaluation budget are independent stop
conditions.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

from .archive import Elite, IslandArchive
from .backend import BackendUnavailable
from .evaluator import FULL, PRELIM, EvalFailure, EvaluationRecord
from .feasibility import FailureType, ValidatorHook, check_feasible
from .operators import Directive, ProposalSummary, SparkOperators
from .program_model import Factor, ProgramError, TagConfig, TaggedProgram

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SEED_INFEASIBLE = 3
EXIT_BACKEND_UNAVAILABLE = 4

PROCEED = "PROCEED"
CULL = "CULL"

OUTCOME_PASS = "PASS"
OUTCOME_FAIL = "FAIL"
OUTCOME_CULLED = "CULLED"
OUTCOME_SEED = "SEED"


class RunMode(enum.Enum):
    SPARK = "SPARK"
    SPARK_NO_ASR = "SPARK_NO_ASR"
    SPARK_NO_RC = "SPARK_NO_RC"
    FREEFORM = "FREEFORM"


class RunAbort(Exception):
    """Fatal run failure mapped to a distinct process exit status."""

    def __init__(self, exit_code: int, message: str):
        super().__init__(message)
        self.exit_code = exit_code


class WallClock:
    """Real monotonic milliseconds."""

    def now_ms(self) -> float:
        return time.monotonic() * 1000.0

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class LogicalClock:
    """Deterministic clock: every reading advances one millisecond."""

    def __init__(self, start: float = 0.0):
        self._t = start

    def now_ms(self) -> float:
        self._t += 1.0
        return self._t

    def state_dict(self) -> dict:
        return {"t": self._t}

    def load_state(self, state: dict) -> None:
        self._t = state["t"]


def cascade_gate(score: float, threshold: float) -> str:
    """Cheap-stage gate: CULL at or below the threshold, else PROCEED."""
    return CULL if score <= threshold else PROCEED


@dataclass
class ProposalRecord:
    """One edit attempt as seen by the proposal buffer."""

    iteration: int
    outcome: str
    failure_type: str | None = None
    factor: str | None = None
    directive: str | None = None
    started_ms: float = 0.0
    finished_ms: float = 0.0
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "outcome": self.outcome,
            "failure_type": self.failure_type,
            "factor": self.factor,
            "directive": self.directive,
            "started_ms": self.started_ms,
            "finished_ms": self.finished_ms,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProposalRecord":
        return cls(**data)


class ProposalBuffer:
    """FIFO of the most recent proposal outcomes (window k')."""

    def __init__(self, window: int = 10):
        self.window = window
        self._records: deque[ProposalRecord] = deque(maxlen=window)

    def push(self, record: ProposalRecord) -> None:
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[ProposalRecord]:
        return list(self._records)

    def summary(self) -> ProposalSummary:
        records = self.records()
        failures = [r for r in records if r.outcome == OUTCOME_FAIL]
        histogram = dict(Counter(r.failure_type for r in failures if r.failure_type))
        rate = len(failures) / len(records) if records else 0.0
        return ProposalSummary(window=len(records), failure_rate=rate, histogram=histogram)

    def snapshot(self) -> list[dict]:
        return [r.to_dict() for r in self._records]

    def restore(self, data: list[dict]) -> None:
        self._records = deque((ProposalRecord.from_dict(d) for d in data), maxlen=self.window)


@dataclass
class BudgetLedger:
    """Attempt and evaluation counters; evaluations increment only on completed scoring."""

    budget: int
    attempt_cap: int | None = None
    attempts: int = 0
    n_eval: int = 0
    fitness_history: list[float] = field(default_factory=list)

    def record_evaluation(self, fitness: float) -> None:
        self.n_eval += 1
        self.fitness_history.append(fitness)

    def exhausted(self) -> bool:
        if self.n_eval >= self.budget:
            return True
        return self.attempt_cap is not None and self.attempts >= self.attempt_cap

    def snapshot(self) -> dict:
        return {
            "budget": self.budget,
            "attempt_cap": self.attempt_cap,
            "attempts": self.attempts,
            "n_eval": self.n_eval,
            "fitness_history": list(self.fitness_history),
        }

    def restore(self, data: dict) -> None:
        self.budget = data["budget"]
        self.attempt_cap = data["attempt_cap"]
        self.attempts = data["attempts"]
        self.n_eval = data["n_eval"]
        self.fitness_history = list(data["fitness_history"])


@dataclass(frozen=True)
class LoopSettings:
    """Knobs of the orchestration loop itself."""

    mode: RunMode = RunMode.SPARK
    budget: int = 100
    attempt_cap: int | None = 100
    k: int = 3
    k_prime: int = 10
    r_asr: int = 3
    migration_period: int = 10
    checkpoint_every: int = 10
    cascade_enabled: bool = True
    cascade_threshold: float = -100.0
    top_inspirations: int = 5
    diverse_inspirations: int = 5
    seed: int = 0


@dataclass
class RunResult:
    best: Elite | None
    attempts: int
    n_eval: int
    stop_reason: str
    trace_path: Path
    checkpoint_path: Path | None


def _rng_state_to_json(state: tuple) -> list:
    return [state[0], list(state[1]), state[2]]


def _rng_state_from_json(data: list) -> tuple:
    return (data[0], tuple(data[1]), data[2])


TRACE_FIELDS = (
    "iteration",
    "mode",
    "factor",
    "directive_digest",
    "outcome",
    "failure_type",
    "fitness",
    "macs",
    "archive_action",
    "entangled",
    "is_factor_local",
    "wall_ms",
)


class SearchRunner:
    """Drives one run end to end; sequential, one attempt in flight."""

    def __init__(
        self,
        settings: LoopSettings,
        operators: SparkOperators,
        evaluator,
        hooks: tuple[ValidatorHook, ...],
        archive: IslandArchive,
        tags: TagConfig,
        trace_path: str | Path,
        checkpoint_path: str | Path | None = None,
        clock=None,
    ):
        self.settings = settings
        self.operators = operators
        self.evaluator = evaluator
        self.hooks = hooks
        self.archive = archive
        self.tags = tags
        self.trace_path = Path(trace_path)
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.clock = clock if clock is not None else WallClock()
        self.rng = random.Random(settings.seed)
        self.ledger = BudgetLedger(budget=settings.budget, attempt_cap=settings.attempt_cap)
        self.q_prop = ProposalBuffer(window=settings.k_prime)
        self._trace_lines = 0
        self._fingerprint: str | None = None

    # -- trace ---------------------------------------------------------------

    def _write_trace(self, handle, record: dict) -> None:
        handle.write(json.dumps(record, separators=(",", ":")) + "\n")
        handle.flush()
        self._trace_lines += 1

    def _base_record(self, iteration: int, outcome: str) -> dict:
        record = {name: None for name in TRACE_FIELDS}
        record["iteration"] = iteration
        record["mode"] = self.settings.mode.value
        record["outcome"] = outcome
        return record

    # -- checkpointing ---------------------------------------------------------

    def _fingerprint_of(self, seed_text: str) -> str:
        blob = json.dumps(
            {
                "settings": {
                    "mode": self.settings.mode.value,
                    "budget": self.settings.budget,
                    "attempt_cap": self.settings.attempt_cap,
                    "k": self.settings.k,
                    "k_prime": self.settings.k_prime,
                    "r_asr": self.settings.r_asr,
                    "migration_period": self.settings.migration_period,
                    "cascade_enabled": self.settings.cascade_enabled,
                    "cascade_threshold": self.settings.cascade_threshold,
                    "seed": self.settings.seed,
                },
                "seed_program": hashlib.sha256(seed_text.encode("utf-8")).hexdigest(),
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _save_checkpoint(self) -> None:
        if self.checkpoint_path is None:
            return
        state = {
            "fingerprint": self._fingerprint,
            "ledger": self.ledger.snapshot(),
            "q_prop": self.q_prop.snapshot(),
            "archive": self.archive.snapshot(),
            "rng_state": _rng_state_to_json(self.rng.getstate()),
            "backend_state": self.operators.backend.state_dict(),
            "clock_state": self.clock.state_dict(),
            "trace_lines": self._trace_lines,
        }
        tmp = self.checkpoint_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state), encoding="utf-8")
        tmp.replace(self.checkpoint_path)

    def _load_checkpoint(self) -> None:
        assert self.checkpoint_path is not None
        state = json.loads(self.checkpoint_path.read_text(encoding="utf-8"))
        if state["fingerprint"] != self._fingerprint:
            raise RunAbort(EXIT_CONFIG, "checkpoint does not match this config/seed program")
        self.ledger.restore(state["ledger"])
        self.q_prop.restore(state["q_prop"])
        self.archive.restore(state["archive"])
        self.rng.setstate(_rng_state_from_json(state["rng_state"]))
        self.operators.backend.load_state(state["backend_state"])
        self.clock.load_state(state["clock_state"])
        # Replay never resumes a partial attempt: drop trace lines past the
        # checkpointed prefix.
        lines = self.trace_path.read_text(encoding="utf-8").splitlines(keepends=True)
        kept = lines[: state["trace_lines"]]
        self.trace_path.write_text("".join(kept), encoding="utf-8")
        self._trace_lines = state["trace_lines"]

    # -- stepping ----------------------------------------------------------

    def _step_proposal(self, ctx) -> tuple[Factor | None, Directive | None, object, int]:
        """Dispatch one editing step per run mode.

        Returns (factor, directive, edit_result, llm_calls).
        """
        mode = self.settings.mode
        if mode is RunMode.FREEFORM:
            edit = self.operators.freeform_edit(ctx)
            return None, None, edit, 1
        if mode is RunMode.SPARK_NO_ASR:
            factor = self.operators.uniform_factor(self.rng)
            calls = 0
        else:
            route = self.operators.asr_route(ctx, r_asr=self.settings.r_asr)
            factor = route.factor
            calls = route.calls
        if mode is RunMode.SPARK_NO_RC:
            directive = self.operators.default_directive(factor)
        else:
            directive = self.operators.rc_directive(ctx, factor, k=self.settings.k)
            calls += 1
        edit = self.operators.sar_edit(ctx, factor, directive)
        return factor, directive, edit, calls + 1

    def _evaluate_candidate(self, child: TaggedProgram) -> tuple[str, dict]:
        """Cascade gate plus full evaluation.

        Returns (outcome, fields) where fields carries fitness/macs/archive
        inputs or failure information.
        """
        text = child.serialize()
        prelim_fitness: float | None = None
        if self.settings.cascade_enabled:
            prelim = self.evaluator.evaluate(text, PRELIM)
            if isinstance(prelim, EvalFailure):
                return OUTCOME_FAIL, {"failure_type": prelim.kind.value, "detail": prelim.detail}
            prelim_fitness = prelim.fitness
            if cascade_gate(prelim.fitness, self.settings.cascade_threshold) == CULL:
                return OUTCOME_CULLED, {"prelim_fitness": prelim_fitness}
        full = self.evaluator.evaluate(text, FULL)
        if isinstance(full, EvalFailure):
            return OUTCOME_FAIL, {"failure_type": full.kind.value, "detail": full.detail}
        assert isinstance(full, EvaluationRecord)
        return OUTCOME_PASS, {"record": full, "prelim_fitness": prelim_fitness}

    # -- the run ---------------------------------------------------------------

    def run(self, seed_text: str, resume: bool = False) -> RunResult:
        self._fingerprint = self._fingerprint_of(seed_text)
        resuming = resume and self.checkpoint_path is not None and self.checkpoint_path.exists()
        if resuming:
            self._load_checkpoint()
        else:
            self.trace_path.parent.mkdir(parents=True, exist_ok=True)
            self.trace_path.write_text("", encoding="utf-8")
            self._trace_lines = 0

        with self.trace_path.open("a", encoding="utf-8") as trace:
            if not resuming:
                self._bootstrap_seed(seed_text, trace)
                self._save_checkpoint()
            try:
                stop_reason = self._loop(trace)
            except BackendUnavailable as exc:
                self._save_checkpoint()
                raise RunAbort(EXIT_BACKEND_UNAVAILABLE, f"backend unavailable: {exc}") from exc
        self._save_checkpoint()
        best = self.archive.best() if len(self.archive) else None
        return RunResult(
            best=best,
            attempts=self.ledger.attempts,
            n_eval=self.ledger.n_eval,
            stop_reason=stop_reason,
            trace_path=self.trace_path,
            checkpoint_path=self.checkpoint_path,
        )

    def _bootstrap_seed(self, seed_text: str, trace) -> None:
        started = self.clock.now_ms()
        try:
            seed = TaggedProgram.parse(seed_text, self.tags)
        except ProgramError as exc:
            raise RunAbort(EXIT_SEED_INFEASIBLE, f"seed program does not parse: {exc}") from exc
        result = self.evaluator.evaluate(seed.serialize(), FULL)
        if isinstance(result, EvalFailure):
            raise RunAbort(
                EXIT_SEED_INFEASIBLE, f"seed evaluation failed: {result.kind.value} {result.detail}"
            )
        self.ledger.record_evaluation(result.fitness)
        descriptor = result.descriptor()
        action = self.archive.add(0, seed.content_digest, descriptor, seed.serialize())
        record = self._base_record(iteration=0, outcome=OUTCOME_SEED)
        record["fitness"] = result.fitness
        record["macs"] = descriptor.macs
        record["archive_action"] = action
        record["wall_ms"] = self.clock.now_ms() - started
        record["island"] = 0
        record["parent_digest"] = None
        record["child_digest"] = seed.content_digest
        record["prelim_fitness"] = None
        record["llm_calls"] = 0
        record["migration_events"] = 0
        record["detail"] = None
        self._write_trace(trace, record)

    def _loop(self, trace) -> str:
        while not self.ledger.exhausted():
            self._attempt(trace)
            if (
                self.settings.checkpoint_every
                and self.ledger.attempts % self.settings.checkpoint_every == 0
            ):
                self._save_checkpoint()
        if self.ledger.n_eval >= self.ledger.budget:
            return "budget"
        return "attempt_cap"

    def _attempt(self, trace) -> None:
        iteration = self.ledger.attempts + 1
        started = self.clock.now_ms()
        island = self.archive.next_island()
        parent = self.archive.sample_parent(self.rng, island)
        ctx = self.operators.build_context(
            self.archive,
            parent,
            self.ledger,
            self.q_prop,
            top_n=self.settings.top_inspirations,
            diverse_n=self.settings.diverse_inspirations,
            k=self.settings.k,
        )

        factor, directive, edit, llm_calls = self._step_proposal(ctx)

        outcome = OUTCOME_FAIL
        failure_type: str | None = None
        verdict = None
        child_digest: str | None = None
        fitness: float | None = None
        macs: int | None = None
        archive_action: str | None = None
        prelim_fitness: float | None = None
        detail: str | None = None

        if edit.failed:
            failure_type = FailureType.EDITOR_FAIL.value
        else:
            report = check_feasible(
                ctx.parent,
                edit.child_text,
                factor,
                self.hooks,
                self.tags,
                enforce_locality=self.settings.mode is not RunMode.FREEFORM,
            )
            verdict = report.verdict
            if report.child is not None:
                child_digest = report.child.content_digest
            if not report.passed:
                failure_type = report.outcome.value
                detail = report.detail or None
            else:
                outcome, fields = self._evaluate_candidate(report.child)
                if outcome == OUTCOME_FAIL:
                    failure_type = fields["failure_type"]
                    detail = fields.get("detail") or None
                elif outcome == OUTCOME_CULLED:
                    prelim_fitness = fields["prelim_fitness"]
                else:
                    eval_record: EvaluationRecord = fields["record"]
                    prelim_fitness = fields.get("prelim_fitness")
                    self.ledger.record_evaluation(eval_record.fitness)
                    descriptor = eval_record.descriptor()
                    fitness = eval_record.fitness
                    macs = descriptor.macs
                    archive_action = self.archive.add(
                        island, report.child.content_digest, descriptor, report.child.serialize()
                    )

        finished = self.clock.now_ms()
        self.ledger.attempts += 1

        # Buffer entry: feasibility outcome (culled candidates were feasible).
        buffer_outcome = OUTCOME_PASS if outcome in (OUTCOME_PASS, OUTCOME_CULLED) else OUTCOME_FAIL
        self.q_prop.push(
            ProposalRecord(
                iteration=iteration,
                outcome=buffer_outcome,
                failure_type=failure_type,
                factor=factor.value if factor else None,
                directive=directive.text if directive else None,
                started_ms=started,
                finished_ms=finished,
                detail=detail or "",
            )
        )

        migration_events = self.archive.migrate(self.settings.migration_period, iteration)

        record = self._base_record(iteration=iteration, outcome=outcome)
        record["factor"] = factor.value if factor else None
        record["directive_digest"] = directive.digest if directive else None
        record["failure_type"] = failure_type
        record["fitness"] = fitness
        record["macs"] = macs
        record["archive_action"] = archive_action
        record["entangled"] = verdict.entangled if verdict is not None else None
        record["is_factor_local"] = verdict.is_factor_local if verdict is not None else None
        record["wall_ms"] = finished - started
        record["island"] = island
        record["parent_digest"] = parent.digest
        record["child_digest"] = child_digest
        record["prelim_fitness"] = prelim_fitness
        record["llm_calls"] = llm_calls
        record["migration_events"] = len(migration_events)
        record["detail"] = detail
        self._write_trace(trace, record)
