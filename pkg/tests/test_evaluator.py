from __future__ import annotations

import json
import random

import pytest

from conftest import build_program
from sparkevo.evaluator import (
    FULL,
    PRELIM,
    CommandEvaluator,
    EvalFailure,
    EvaluationRecord,
    EvaluatorSpec,
    SyntheticEvaluator,
    SyntheticTask,
    synthetic_score,
)
from sparkevo.feasibility import FailureType
from sparkevo.program_model import Factor, TagConfig, TaggedProgram
from sparkevo.simulate import DEFAULT_SIM_SEED


def write_stub(tmp_path, body: str):
    script = tmp_path / "stub_eval.py"
    script.write_text(body, encoding="utf-8")
    return CommandEvaluator(EvaluatorSpec(command=f"python3 {script}", timeout_full=20.0, timeout_prelim=20.0))


class TestCommandEvaluator:
    def test_ok_record(self, tmp_path):
        evaluator = write_stub(
            tmp_path,
            'import json\nprint(json.dumps({"status": "ok", "fitness": 0.4678,'
            ' "descriptors": {"macs": 661190}}))\n',
        )
        record = evaluator.evaluate("any text", FULL)
        assert isinstance(record, EvaluationRecord)
        assert record.fitness == 0.4678
        assert record.macs == 661190
        assert record.params is None

    def test_stage_flag_and_path_passed(self, tmp_path):
        evaluator = write_stub(
            tmp_path,
            "import json, sys, pathlib\n"
            "stage = sys.argv[sys.argv.index('--stage') + 1]\n"
            "text = pathlib.Path(sys.argv[-1]).read_text()\n"
            "fit = 0.25 if stage == 'prelim' else 0.75\n"
            "assert 'MARKER42' in text\n"
            'print(json.dumps({"status": "ok", "fitness": fit, "descriptors": {"macs": 1}}))\n',
        )
        prelim = evaluator.evaluate("text with MARKER42", PRELIM)
        full = evaluator.evaluate("text with MARKER42", FULL)
        assert prelim.fitness == 0.25
        assert full.fitness == 0.75

    def test_nonzero_exit(self, tmp_path):
        evaluator = write_stub(tmp_path, "import sys\nsys.exit(2)\n")
        failure = evaluator.evaluate("x", FULL)
        assert isinstance(failure, EvalFailure)
        assert failure.kind is FailureType.EVALUATOR_ERROR

    def test_timeout(self, tmp_path):
        script = tmp_path / "slow.py"
        script.write_text("import time\ntime.sleep(10)\n", encoding="utf-8")
        evaluator = CommandEvaluator(
            EvaluatorSpec(command=f"python3 {script}", timeout_full=0.3, timeout_prelim=0.3)
        )
        failure = evaluator.evaluate("x", FULL)
        assert failure.kind is FailureType.TIMEOUT

    def test_malformed_stdout(self, tmp_path):
        evaluator = write_stub(tmp_path, "print('not json at all')\n")
        failure = evaluator.evaluate("x", FULL)
        assert failure.kind is FailureType.EVALUATOR_ERROR

    def test_error_status(self, tmp_path):
        evaluator = write_stub(
            tmp_path, 'import json\nprint(json.dumps({"status": "error", "type": "oom"}))\n'
        )
        failure = evaluator.evaluate("x", FULL)
        assert failure.kind is FailureType.EVALUATOR_ERROR
        assert "oom" in failure.detail

    def test_full_requires_macs(self, tmp_path):
        evaluator = write_stub(
            tmp_path, 'import json\nprint(json.dumps({"status": "ok", "fitness": 0.5}))\n'
        )
        assert isinstance(evaluator.evaluate("x", FULL), EvalFailure)

    def test_prelim_fitness_only_ok(self, tmp_path):
        evaluator = write_stub(
            tmp_path, 'import json\nprint(json.dumps({"status": "ok", "fitness": 0.5}))\n'
        )
        record = evaluator.evaluate("x", PRELIM)
        assert isinstance(record, EvaluationRecord)
        assert record.macs is None

    def test_json_on_last_line_with_noise(self, tmp_path):
        evaluator = write_stub(
            tmp_path,
            "print('training log line')\n"
            'import json\nprint(json.dumps({"status": "ok", "fitness": 0.1, "descriptors": {"macs": 7}}))\n',
        )
        record = evaluator.evaluate("x", FULL)
        assert record.fitness == 0.1

    def test_missing_command(self):
        evaluator = CommandEvaluator(EvaluatorSpec(command="/no/such/evaluator-bin"))
        failure = evaluator.evaluate("x", FULL)
        assert failure.kind is FailureType.EVALUATOR_ERROR


class TestSyntheticScore:
    def test_empty_action_body_floor(self, tags):
        program = TaggedProgram.parse(build_program(ac_body=()), tags)
        descriptor = synthetic_score(program, SyntheticTask())
        assert descriptor.fitness == 0.0

    def test_one_more_token_raises_by_per_hit(self, tags):
        task = SyntheticTask(target_token="gate", per_hit=0.04, line_cap=100)
        base = TaggedProgram.parse(build_program(ac_body=("x = gate",)), tags)
        more = TaggedProgram.parse(build_program(ac_body=("x = gate", "y = gate")), tags)
        low = synthetic_score(base, task).fitness
        high = synthetic_score(more, task).fitness
        assert high == pytest.approx(low + 0.04)

    def test_line_penalty_over_cap(self, tags):
        task = SyntheticTask(target_token="gate", per_hit=0.1, line_cap=10, line_penalty=0.01)
        body = tuple(f"pad_{i} = {i}" for i in range(10)) + ("x = gate",)
        program = TaggedProgram.parse(build_program(ac_body=body), tags)
        total = len(program.normalized_lines)
        expected = 0.1 - 0.01 * max(0, total - 10)
        assert synthetic_score(program, task).fitness == pytest.approx(max(0.0, expected))

    def test_golden_sim_seed(self, tags):
        program = TaggedProgram.parse(DEFAULT_SIM_SEED, tags)
        descriptor = synthetic_score(program, SyntheticTask())
        assert descriptor.fitness == pytest.approx(0.08)
        assert descriptor.macs == 336000

    def test_bounded_in_unit_interval(self, tags):
        task = SyntheticTask(per_hit=0.5)
        body = tuple(f"g{i} = gate * gate" for i in range(10))
        program = TaggedProgram.parse(build_program(ac_body=body), tags)
        assert synthetic_score(program, task).fitness == 1.0

    def test_jitter_deterministic(self, tags):
        task = SyntheticTask(jitter=0.05, seed=3)
        program = TaggedProgram.parse(build_program(), tags)
        a = synthetic_score(program, task).fitness
        b = synthetic_score(program, task).fitness
        assert a == b

    def test_matches_independent_reimplementation(self, tags):
        """500 random programs against a from-scratch restatement of the rule."""
        rng = random.Random(99)
        task = SyntheticTask(
            target_token="gate", per_hit=0.03, line_cap=20, line_penalty=0.02, macs_per_line=5000
        )
        pool = ["x = gate", "y = 1", "z = gate * gate", "w = step", ""]
        for _ in range(500):
            op = tuple(rng.choice(pool) for _ in range(rng.randint(0, 6)))
            ac = tuple(rng.choice(pool) for _ in range(rng.randint(0, 6)))
            text = build_program(op_body=op, ac_body=ac)
            program = TaggedProgram.parse(text, tags)

            # Independent oracle: recompute from the raw text.
            lines = text.rstrip("\n").split("\n")
            start = lines.index("# <SPARK:ACTION>") + 1
            end = lines.index("# </SPARK:ACTION>")
            hits = sum(line.count("gate") for line in lines[start:end])
            penalty = 0.02 * max(0, len(lines) - 20)
            expected_fitness = min(1.0, max(0.0, 0.03 * hits - penalty))
            expected_macs = 5000 * len(lines)

            descriptor = synthetic_score(program, task)
            assert descriptor.fitness == pytest.approx(expected_fitness)
            assert descriptor.macs == expected_macs


class TestSyntheticEvaluator:
    def test_stages_consistent(self, tags):
        evaluator = SyntheticEvaluator(SyntheticTask(), tags)
        text = build_program(ac_body=("x = gate",))
        prelim = evaluator.evaluate(text, PRELIM)
        full = evaluator.evaluate(text, FULL)
        assert prelim.fitness == full.fitness
        assert full.macs is not None

    def test_unparseable_candidate(self, tags):
        evaluator = SyntheticEvaluator(SyntheticTask(), tags)
        failure = evaluator.evaluate("no tags", FULL)
        assert isinstance(failure, EvalFailure)
        assert failure.kind is FailureType.EVALUATOR_ERROR

    def test_deterministic_flag(self, tags):
        assert SyntheticEvaluator(SyntheticTask(), tags).deterministic
        assert not CommandEvaluator(EvaluatorSpec(command="x")).deterministic
