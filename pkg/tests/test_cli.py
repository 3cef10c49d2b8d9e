from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from conftest import build_program
from fixture_pairs import EXPECTED_ENTANGLED, labeled_pairs
from sparkevo.cli import main
from sparkevo.simulate import DEFAULT_SIM_SEED


@pytest.fixture
def runner():
    return CliRunner()


def write_scripted_setup(tmp_path: Path, plans: list[str], attempt_cap: int | None = None) -> Path:
    seed_path = tmp_path / "seed.py"
    seed_path.write_text(build_program(), encoding="utf-8")
    script = {
        "ROUTE": ["ACTION"] * len(plans),
        "DIRECTIVE": ["improve it"] * len(plans),
        "EDIT": plans,
    }
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps(script), encoding="utf-8")
    cap = len(plans) if attempt_cap is None else attempt_cap
    config = f"""
[run]
mode = "SPARK"
budget = 100
attempt_cap = {cap}
seed = 0
seed_program = "{seed_path}"
out_dir = "{tmp_path / 'out'}"

[backend]
kind = "scripted"
script_path = "{script_path}"

[evaluator]
kind = "synthetic"

[[hooks]]
kind = "SYNTAX"
forbid_substring = "@@BROKEN@@"
"""
    config_path = tmp_path / "run.toml"
    config_path.write_text(config, encoding="utf-8")
    return config_path


def edit_plans(n: int) -> list[str]:
    return [
        build_program(ac_body=("step = op_gain", f"out = step  # v{i}")) for i in range(n)
    ]


class TestValidateConfig:
    def test_ok(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(1))
        result = runner.invoke(main, ["validate-config", "--config", str(config)])
        assert result.exit_code == 0
        assert "ok" in result.output

    def test_invalid_budget_listed(self, runner, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text('[run]\nbudget = 0\nattempt_cap = -3\n', encoding="utf-8")
        result = runner.invoke(main, ["validate-config", "--config", str(config)])
        assert result.exit_code == 2
        assert "run.budget" in result.output
        assert "run.attempt_cap" in result.output

    def test_unknown_field_listed(self, runner, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text("[run]\nbudgett = 5\n", encoding="utf-8")
        result = runner.invoke(main, ["validate-config", "--config", str(config)])
        assert result.exit_code == 2
        assert "budgett" in result.output


class TestRunCommand:
    def test_run_completes(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(3))
        result = runner.invoke(main, ["run", "--config", str(config)])
        assert result.exit_code == 0, result.output
        assert "best elite" in result.output
        trace = tmp_path / "out" / "trace.jsonl"
        assert trace.exists()
        assert len(trace.read_text().splitlines()) == 4  # seed + 3 attempts

    def test_trace_out_override(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(1))
        custom = tmp_path / "custom_trace.jsonl"
        result = runner.invoke(main, ["run", "--config", str(config), "--trace-out", str(custom)])
        assert result.exit_code == 0
        assert custom.exists()

    def test_determinism_across_runs(self, runner, tmp_path):
        config_a = write_scripted_setup(tmp_path / "a", edit_plans(4))
        config_b = write_scripted_setup(tmp_path / "b", edit_plans(4))
        assert runner.invoke(main, ["run", "--config", str(config_a)]).exit_code == 0
        assert runner.invoke(main, ["run", "--config", str(config_b)]).exit_code == 0
        trace_a = (tmp_path / "a" / "out" / "trace.jsonl").read_bytes()
        trace_b = (tmp_path / "b" / "out" / "trace.jsonl").read_bytes()
        assert trace_a == trace_b

    def test_resume_after_completion_keeps_trace(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(2))
        assert runner.invoke(main, ["run", "--config", str(config)]).exit_code == 0
        trace = tmp_path / "out" / "trace.jsonl"
        before = trace.read_bytes()
        result = runner.invoke(main, ["run", "--config", str(config), "--resume"])
        assert result.exit_code == 0
        assert trace.read_bytes() == before

    def test_missing_seed_program_is_config_error(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(1))
        (tmp_path / "seed.py").unlink()
        result = runner.invoke(main, ["run", "--config", str(config)])
        assert result.exit_code == 2

    def test_untagged_seed_exits_with_seed_code(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(1))
        (tmp_path / "seed.py").write_text("def f():\n    return 1\n", encoding="utf-8")
        result = runner.invoke(main, ["run", "--config", str(config)])
        assert result.exit_code == 3


class TestReportCommand:
    def test_report_with_reference(self, runner, tmp_path):
        config = write_scripted_setup(tmp_path, edit_plans(3))
        assert runner.invoke(main, ["run", "--config", str(config)]).exit_code == 0
        trace = tmp_path / "out" / "trace.jsonl"
        out_dir = tmp_path / "report"
        result = runner.invoke(
            main,
            ["report", str(trace), "--reference-evals", "1600", "--out-dir", str(out_dir)],
        )
        assert result.exit_code == 0, result.output
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["runs"][0]["evaluations_used"] == 4
        assert (out_dir / "trace_series.csv").exists()
        assert "efficiency" in result.output

    def test_report_multi_trace_aggregate(self, runner, tmp_path):
        config_a = write_scripted_setup(tmp_path / "a", edit_plans(3))
        config_b = write_scripted_setup(tmp_path / "b", edit_plans(3))
        runner.invoke(main, ["run", "--config", str(config_a)])
        runner.invoke(main, ["run", "--config", str(config_b)])
        out_dir = tmp_path / "report"
        result = runner.invoke(
            main,
            [
                "report",
                str(tmp_path / "a" / "out" / "trace.jsonl"),
                str(tmp_path / "b" / "out" / "trace.jsonl"),
                "--out-dir",
                str(out_dir),
            ],
        )
        assert result.exit_code == 0
        assert (out_dir / "aggregate_series.csv").exists()
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["aggregate"]["runs"] == 2

    def test_corrupt_trace_aborts_with_line(self, runner, tmp_path):
        trace = tmp_path / "trace.jsonl"
        trace.write_text('{"iteration": 0, "outcome": "SEED"}\n{broken\n', encoding="utf-8")
        result = runner.invoke(main, ["report", str(trace), "--out-dir", str(tmp_path / "r")])
        assert result.exit_code == 2
        assert "line 2" in result.output


class TestAuditCommand:
    def write_manifest(self, tmp_path: Path, pairs) -> Path:
        manifest = tmp_path / "pairs.jsonl"
        lines = []
        for i, pair in enumerate(pairs):
            parent_path = tmp_path / f"parent_{i}.py"
            child_path = tmp_path / f"child_{i}.py"
            parent_path.write_text(pair["parent"], encoding="utf-8")
            child_path.write_text(pair["child"], encoding="utf-8")
            lines.append(
                json.dumps(
                    {
                        "parent": str(parent_path),
                        "child": str(child_path),
                        "factor": pair.get("factor"),
                    }
                )
            )
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest

    def test_labeled_corpus_rate(self, runner, tmp_path):
        pairs = labeled_pairs()
        manifest = self.write_manifest(tmp_path, pairs)
        out = tmp_path / "verdicts.jsonl"
        result = runner.invoke(main, ["audit", "--pairs", str(manifest), "--out", str(out)])
        assert result.exit_code == 0, result.output
        expected_rate = EXPECTED_ENTANGLED / len(pairs)
        assert f"entanglement_rate: {expected_rate:.4f}" in result.output
        verdicts = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(verdicts) == len(pairs)
        for pair, verdict in zip(pairs, verdicts):
            assert verdict["entangled"] == pair["entangled"], pair["name"]

    def test_identical_pairs_rate_zero(self, runner, tmp_path):
        program = build_program()
        pairs = [{"parent": program, "child": program, "factor": None} for _ in range(4)]
        manifest = self.write_manifest(tmp_path, pairs)
        result = runner.invoke(
            main, ["audit", "--pairs", str(manifest), "--out", str(tmp_path / "v.jsonl")]
        )
        assert "entanglement_rate: 0.0000" in result.output

    def test_tag_breaking_pair_counts_entangled(self, runner, tmp_path):
        program = build_program()
        broken = program.replace("# <SPARK:ACTION>\n", "")
        manifest = self.write_manifest(
            tmp_path, [{"parent": program, "child": broken, "factor": None}]
        )
        result = runner.invoke(
            main, ["audit", "--pairs", str(manifest), "--out", str(tmp_path / "v.jsonl")]
        )
        assert "entanglement_rate: 1.0000" in result.output


class TestSimulateCommand:
    def test_pv_one_is_always_valid(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["simulate", "--p-v", "1.0", "--trials", "150", "--seed", "1",
             "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        rows = json.loads((tmp_path / "validity_table.json").read_text())
        assert all(row["measured"] == 1.0 for row in rows)

    def test_invalid_pv_rejected(self, runner, tmp_path):
        result = runner.invoke(
            main, ["simulate", "--p-v", "1.5", "--out-dir", str(tmp_path)]
        )
        assert result.exit_code == 2

    def test_k1_tracks_pv(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["simulate", "--p-v", "0.7", "--trials", "400", "--k", "1",
             "--seed", "2", "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 0
        rows = json.loads((tmp_path / "validity_table.json").read_text())
        assert len(rows) == 1
        assert abs(rows[0]["measured"] - 0.7) < 0.08

    def test_mode_gap_small(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["simulate", "--p-v", "0.75", "--trials", "50", "--mode-gap",
             "--attempts", "30", "--seeds", "1,2", "--out-dir", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        gap = json.loads((tmp_path / "mode_gap.json").read_text())
        assert len(gap) == 2
        for row in gap:
            assert row["spark_valid_rate"] > row["freeform_valid_rate"]


class TestSyntheticEvalCommand:
    def test_contract_output(self, runner, tmp_path):
        program = tmp_path / "candidate.py"
        program.write_text(DEFAULT_SIM_SEED, encoding="utf-8")
        result = runner.invoke(main, ["synthetic-eval", str(program), "--stage", "full"])
        assert result.exit_code == 0
        payload = json.loads(result.output)
        assert payload["status"] == "ok"
        assert payload["fitness"] == pytest.approx(0.08)
        assert payload["descriptors"]["macs"] == 336000

    def test_unparseable_program_reports_error(self, runner, tmp_path):
        program = tmp_path / "candidate.py"
        program.write_text("no tags\n", encoding="utf-8")
        result = runner.invoke(main, ["synthetic-eval", str(program)])
        payload = json.loads(result.output)
        assert payload["status"] == "error"
