from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from conftest import build_program
from sparkevo.archive import BinningSpec, IslandArchive
from sparkevo.backend import BackendUnavailable, ChatBackend, Role, ScriptedBackend
from sparkevo.evaluator import FULL, PRELIM, EvalFailure, SyntheticEvaluator, SyntheticTask
from sparkevo.feasibility import FailureType, HookKind, ValidatorHook
from sparkevo.operators import DecodingConfig, PromptTemplates, SparkOperators
from sparkevo.program_model import TagConfig
from sparkevo.search import (
    CULL,
    EXIT_BACKEND_UNAVAILABLE,
    EXIT_SEED_INFEASIBLE,
    PROCEED,
    LogicalClock,
    LoopSettings,
    RunAbort,
    RunMode,
    SearchRunner,
    TRACE_FIELDS,
    cascade_gate,
)

TAGS = TagConfig()
SEED_TEXT = build_program()
MARKER_HOOK = (ValidatorHook(kind=HookKind.SYNTAX, forbid_substring="@@BROKEN@@"),)

PLAN_KINDS = ("pass", "distinct_pass", "editor_fail", "tag_violation", "not_local", "syntax")


def plan_response(kind: str, index: int) -> str:
    if kind == "pass":
        return SEED_TEXT
    if kind == "distinct_pass":
        return build_program(ac_body=("step = op_gain", f"out = step  # v{index}"))
    if kind == "editor_fail":
        # Dropping a tag entirely is caught by the edit step's tag check.
        return SEED_TEXT.replace(TAGS.operator_open + "\n", "")
    if kind == "tag_violation":
        # All four tags present, but the duplicated open tag breaks parsing.
        return SEED_TEXT.replace(
            TAGS.operator_open, TAGS.operator_open + "\n" + TAGS.operator_open, 1
        )
    if kind == "not_local":
        return build_program(op_body=(f"op_width = {index + 100}", "op_gain = 2"))
    if kind == "both_regions":
        return build_program(
            op_body=(f"op_width = {index + 200}", "op_gain = 2"),
            ac_body=("step = op_gain", f"out = step + {index}"),
        )
    if kind == "syntax":
        return build_program(ac_body=("step = op_gain", f"@@BROKEN@@ {index}"))
    raise ValueError(kind)


EXPECTED_FAILURE = {
    "editor_fail": FailureType.EDITOR_FAIL.value,
    "tag_violation": FailureType.TAG_VIOLATION.value,
    "not_local": FailureType.NOT_FACTOR_LOCAL.value,
    "syntax": FailureType.SYNTAX.value,
}


def scripted_runner(
    tmp_path: Path,
    plans: list[str],
    budget: int = 100,
    attempt_cap: int | None = None,
    mode: RunMode = RunMode.SPARK,
    checkpoint: bool = False,
    evaluator=None,
    cascade_enabled: bool = False,
    cascade_threshold: float = -100.0,
    migration_period: int = 10,
) -> SearchRunner:
    backend = ScriptedBackend(
        {
            Role.ROUTE: ["ACTION"] * len(plans),
            Role.DIRECTIVE: ["improve the wiring"] * len(plans),
            Role.EDIT: [plan_response(kind, i) for i, kind in enumerate(plans)],
        }
    )
    operators = SparkOperators(
        backend=backend, templates=PromptTemplates.load(), tags=TAGS, decoding=DecodingConfig()
    )
    settings = LoopSettings(
        mode=mode,
        budget=budget,
        attempt_cap=len(plans) if attempt_cap is None else attempt_cap,
        checkpoint_every=10 if checkpoint else 0,
        cascade_enabled=cascade_enabled,
        cascade_threshold=cascade_threshold,
        migration_period=migration_period,
        seed=0,
    )
    return SearchRunner(
        settings=settings,
        operators=operators,
        evaluator=evaluator or SyntheticEvaluator(SyntheticTask(), TAGS),
        hooks=MARKER_HOOK,
        archive=IslandArchive(BinningSpec.build(), islands=2),
        tags=TAGS,
        trace_path=tmp_path / "trace.jsonl",
        checkpoint_path=(tmp_path / "ckpt.json") if checkpoint else None,
        clock=LogicalClock(),
    )


def read_records(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestCascadeGate:
    def test_cull_at_or_below_threshold(self):
        assert cascade_gate(-150.0, -100.0) == CULL
        assert cascade_gate(-100.0, -100.0) == CULL

    def test_proceed(self):
        assert cascade_gate(0.3, -100.0) == PROCEED


class TestBudgetAccounting:
    def test_budget_one_evaluates_only_seed(self, tmp_path):
        runner = scripted_runner(tmp_path, plans=["pass"] * 5, budget=1)
        result = runner.run(SEED_TEXT)
        assert result.attempts == 0
        assert result.n_eval == 1
        assert result.stop_reason == "budget"
        records = read_records(result.trace_path)
        assert len(records) == 1
        assert records[0]["outcome"] == "SEED"

    def test_alternating_pass_fail(self, tmp_path):
        plans = ["pass", "editor_fail"] * 5
        runner = scripted_runner(tmp_path, plans, budget=100, attempt_cap=10)
        result = runner.run(SEED_TEXT)
        records = read_records(result.trace_path)
        attempts = [r for r in records if r["iteration"] >= 1]
        assert len(attempts) == 10
        assert sum(1 for r in attempts if r["outcome"] == "PASS") == 5
        assert result.n_eval == 6
        assert result.stop_reason == "attempt_cap"

    def test_failure_types_recorded(self, tmp_path):
        plans = ["editor_fail", "tag_violation", "not_local", "syntax", "pass"]
        runner = scripted_runner(tmp_path, plans)
        result = runner.run(SEED_TEXT)
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        for plan, record in zip(plans, attempts):
            if plan in EXPECTED_FAILURE:
                assert record["outcome"] == "FAIL"
                assert record["failure_type"] == EXPECTED_FAILURE[plan]
            else:
                assert record["outcome"] == "PASS"
                assert record["failure_type"] is None

    def test_random_scripted_schedules_keep_budget_identity(self, tmp_path):
        """Property over 100 random schedules: n_eval = 1 + #PASS, FAIL rows
        carry no fitness, and the run stops at min(budget, attempt_cap)."""
        for case in range(100):
            rng = random.Random(case)
            plans = [rng.choice(PLAN_KINDS) for _ in range(rng.randint(1, 20))]
            budget = rng.randint(1, 8)
            runner = scripted_runner(tmp_path / f"case{case}", plans, budget=budget)
            result = runner.run(SEED_TEXT)
            records = read_records(result.trace_path)
            attempts = [r for r in records if r["iteration"] >= 1]
            passes = [r for r in attempts if r["outcome"] == "PASS"]
            assert result.n_eval == 1 + len(passes)
            assert result.n_eval <= budget
            for record in attempts:
                if record["outcome"] == "FAIL":
                    assert record["fitness"] is None
                    assert record["failure_type"] is not None
            if result.n_eval < budget:
                assert result.attempts == len(plans)
            else:
                assert result.stop_reason == "budget"
            # Mode isolation: factor-scoped PASS rows hold a local verdict.
            for record in passes:
                assert record["is_factor_local"] is True

    def test_fifo_window(self, tmp_path):
        plans = ["editor_fail"] * 13
        runner = scripted_runner(tmp_path, plans)
        runner.run(SEED_TEXT)
        assert len(runner.q_prop) == 10
        assert runner.q_prop.records()[0].iteration == 4


class TestTraceSchema:
    def test_fixed_fields_present(self, tmp_path):
        runner = scripted_runner(tmp_path, ["distinct_pass", "syntax"])
        result = runner.run(SEED_TEXT)
        for record in read_records(result.trace_path):
            for field in TRACE_FIELDS:
                assert field in record

    def test_pass_rows_carry_scores_and_archive_action(self, tmp_path):
        runner = scripted_runner(tmp_path, ["distinct_pass"])
        result = runner.run(SEED_TEXT)
        record = read_records(result.trace_path)[1]
        assert record["fitness"] is not None
        assert record["macs"] is not None
        assert record["archive_action"] in ("INSERTED", "REPLACED", "REJECTED")
        assert record["directive_digest"] is not None
        assert record["factor"] == "ACTION"

    def test_wall_ms_deterministic_with_logical_clock(self, tmp_path):
        runner = scripted_runner(tmp_path, ["pass", "pass"])
        result = runner.run(SEED_TEXT)
        values = [r["wall_ms"] for r in read_records(result.trace_path)]
        runner2 = scripted_runner(tmp_path / "b", ["pass", "pass"])
        result2 = runner2.run(SEED_TEXT)
        assert values == [r["wall_ms"] for r in read_records(result2.trace_path)]


class TestFreeformMode:
    def test_locality_logged_but_not_enforced(self, tmp_path):
        plans = ["both_regions", "tag_violation", "distinct_pass"]
        runner = scripted_runner(tmp_path, plans, mode=RunMode.FREEFORM)
        result = runner.run(SEED_TEXT)
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        # A cross-region edit passes in free-form mode but its verdict is logged.
        assert attempts[0]["outcome"] == "PASS"
        assert attempts[0]["is_factor_local"] is False
        assert attempts[0]["entangled"] is True
        # Tag breaking still rejects.
        assert attempts[1]["outcome"] == "FAIL"
        assert attempts[1]["failure_type"] == FailureType.TAG_VIOLATION.value
        assert attempts[1]["entangled"] is True
        assert attempts[2]["outcome"] == "PASS"
        for record in attempts:
            assert record["failure_type"] != FailureType.NOT_FACTOR_LOCAL.value

    def test_freeform_uses_single_llm_call(self, tmp_path):
        runner = scripted_runner(tmp_path, ["distinct_pass"], mode=RunMode.FREEFORM)
        runner.run(SEED_TEXT)
        assert runner.operators.backend.calls_for(Role.EDIT) == 1
        assert runner.operators.backend.calls_for(Role.ROUTE) == 0
        assert runner.operators.backend.calls_for(Role.DIRECTIVE) == 0


class TestAblationModes:
    def test_no_asr_uses_no_route_calls(self, tmp_path):
        runner = scripted_runner(tmp_path, ["distinct_pass"] * 3, mode=RunMode.SPARK_NO_ASR)
        runner.run(SEED_TEXT)
        backend = runner.operators.backend
        assert backend.calls_for(Role.ROUTE) == 0
        assert backend.calls_for(Role.DIRECTIVE) == 3

    def test_no_rc_uses_default_directive(self, tmp_path):
        runner = scripted_runner(tmp_path, ["distinct_pass"] * 2, mode=RunMode.SPARK_NO_RC)
        result = runner.run(SEED_TEXT)
        backend = runner.operators.backend
        assert backend.calls_for(Role.DIRECTIVE) == 0
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        digests = {r["directive_digest"] for r in attempts}
        assert len(digests) == 1  # the fixed default directive


class _CullingEvaluator:
    """Prelim stage far below the cascade threshold; full stage healthy."""

    deterministic = True

    def __init__(self):
        self.full_calls = 0
        self.inner = SyntheticEvaluator(SyntheticTask(), TAGS)

    def evaluate(self, text, stage):
        if stage == PRELIM:
            record = self.inner.evaluate(text, stage)
            return type(record)(fitness=-200.0, macs=record.macs, params=None, stage=stage)
        self.full_calls += 1
        return self.inner.evaluate(text, stage)


class TestCascade:
    def test_culled_candidates_do_not_consume_budget(self, tmp_path):
        evaluator = _CullingEvaluator()
        runner = scripted_runner(
            tmp_path, ["distinct_pass"] * 4, evaluator=evaluator, cascade_enabled=True
        )
        result = runner.run(SEED_TEXT)
        assert result.n_eval == 1  # only the seed
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        assert all(r["outcome"] == "CULLED" for r in attempts)
        assert all(r["fitness"] is None for r in attempts)
        assert all(r["prelim_fitness"] == -200.0 for r in attempts)
        assert evaluator.full_calls == 1  # seed bootstrap only

    def test_gate_disabled_always_proceeds(self, tmp_path):
        evaluator = _CullingEvaluator()
        runner = scripted_runner(
            tmp_path, ["distinct_pass"] * 2, evaluator=evaluator, cascade_enabled=False
        )
        result = runner.run(SEED_TEXT)
        assert result.n_eval == 3

    def test_above_threshold_proceeds(self, tmp_path):
        runner = scripted_runner(
            tmp_path, ["distinct_pass"] * 2, cascade_enabled=True, cascade_threshold=-100.0
        )
        result = runner.run(SEED_TEXT)
        assert result.n_eval == 3


class _FailingEvaluator:
    deterministic = True

    def __init__(self, kind):
        self.kind = kind
        self.inner = SyntheticEvaluator(SyntheticTask(), TAGS)
        self.calls = 0

    def evaluate(self, text, stage):
        self.calls += 1
        if self.calls == 1:  # let the seed through
            return self.inner.evaluate(text, stage)
        return EvalFailure(self.kind, "induced failure")


class TestEvaluatorFailures:
    @pytest.mark.parametrize("kind", [FailureType.TIMEOUT, FailureType.EVALUATOR_ERROR])
    def test_eval_failure_marks_fail_without_budget(self, tmp_path, kind):
        runner = scripted_runner(tmp_path, ["distinct_pass"] * 3, evaluator=_FailingEvaluator(kind))
        result = runner.run(SEED_TEXT)
        assert result.n_eval == 1
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        assert all(r["outcome"] == "FAIL" for r in attempts)
        assert all(r["failure_type"] == kind.value for r in attempts)
        assert all(r["fitness"] is None for r in attempts)


class TestAbortPaths:
    def test_unparseable_seed(self, tmp_path):
        runner = scripted_runner(tmp_path, ["pass"])
        with pytest.raises(RunAbort) as excinfo:
            runner.run("no tags in this seed\n")
        assert excinfo.value.exit_code == EXIT_SEED_INFEASIBLE

    def test_seed_evaluation_failure(self, tmp_path):
        runner = scripted_runner(
            tmp_path, ["pass"], evaluator=_FailingEvaluator(FailureType.EVALUATOR_ERROR)
        )
        evaluator = runner.evaluator
        evaluator.calls = 1  # next call (the seed) fails
        with pytest.raises(RunAbort) as excinfo:
            runner.run(SEED_TEXT)
        assert excinfo.value.exit_code == EXIT_SEED_INFEASIBLE

    def test_backend_unavailable_aborts_with_distinct_code(self, tmp_path):
        class DeadBackend(ChatBackend):
            def complete(self, request):
                raise BackendUnavailable("endpoint down")

        operators = SparkOperators(
            backend=DeadBackend(), templates=PromptTemplates.load(), tags=TAGS
        )
        runner = SearchRunner(
            settings=LoopSettings(mode=RunMode.SPARK, budget=5, attempt_cap=5, checkpoint_every=0),
            operators=operators,
            evaluator=SyntheticEvaluator(SyntheticTask(), TAGS),
            hooks=(),
            archive=IslandArchive(BinningSpec.build(), islands=1),
            tags=TAGS,
            trace_path=tmp_path / "trace.jsonl",
            clock=LogicalClock(),
        )
        with pytest.raises(RunAbort) as excinfo:
            runner.run(SEED_TEXT)
        assert excinfo.value.exit_code == EXIT_BACKEND_UNAVAILABLE


class TestMigrationSchedule:
    def test_migration_exactly_on_period(self, tmp_path):
        plans = ["distinct_pass" if i % 2 == 0 else "editor_fail" for i in range(25)]
        runner = scripted_runner(tmp_path, plans, migration_period=10)
        result = runner.run(SEED_TEXT)
        attempts = [r for r in read_records(result.trace_path) if r["iteration"] >= 1]
        for record in attempts:
            if record["iteration"] % 10 == 0:
                assert record["migration_events"] > 0
            else:
                assert record["migration_events"] == 0


class TestDeterminismAndResume:
    def test_identical_runs_identical_traces(self, tmp_path):
        plans = ["distinct_pass", "syntax", "pass", "editor_fail"] * 3
        runner_a = scripted_runner(tmp_path / "a", plans)
        runner_a.run(SEED_TEXT)
        runner_b = scripted_runner(tmp_path / "b", plans)
        runner_b.run(SEED_TEXT)
        assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (
            tmp_path / "b" / "trace.jsonl"
        ).read_bytes()

    def test_crash_resume_equals_uninterrupted(self, tmp_path):
        plans = ["distinct_pass", "syntax", "pass", "editor_fail", "not_local"] * 5
        reference = scripted_runner(tmp_path / "ref", plans, checkpoint=True)
        reference.run(SEED_TEXT)

        crashing = scripted_runner(tmp_path / "crash", plans, checkpoint=True)

        class Boom(Exception):
            pass

        original = crashing._attempt

        def bomb(trace):
            if crashing.ledger.attempts >= 13:
                raise Boom()
            original(trace)

        crashing._attempt = bomb
        with pytest.raises(Boom):
            crashing.run(SEED_TEXT)

        resumed = scripted_runner(tmp_path / "crash", plans, checkpoint=True)
        resumed.run(SEED_TEXT, resume=True)
        assert (tmp_path / "crash" / "trace.jsonl").read_bytes() == (
            tmp_path / "ref" / "trace.jsonl"
        ).read_bytes()

    def test_resume_on_finished_run_is_noop(self, tmp_path):
        plans = ["distinct_pass"] * 4
        runner = scripted_runner(tmp_path, plans, checkpoint=True)
        runner.run(SEED_TEXT)
        before = (tmp_path / "trace.jsonl").read_bytes()
        again = scripted_runner(tmp_path, plans, checkpoint=True)
        result = again.run(SEED_TEXT, resume=True)
        assert (tmp_path / "trace.jsonl").read_bytes() == before
        assert result.attempts == 4
