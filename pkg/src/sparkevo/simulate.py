"""Desk-scale simulations with the stochastic mock editor.

Two experiments ship: a validity table measuring how the pass rate of k-scope
edits decays against the analytic per-scope model (p_v ** k), and a mode-gap
comparison running full factor-scoped and free-form searches against the
synthetic evaluator to show that locality enforcement converts more attempts
into evaluations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from .backend import ChatRequest, Role, StochasticConfig, StochasticEditorBackend, make_edit_metadata
from .config import HookConfig, RunConfig, build_runner
from .feasibility import HookKind, ValidatorHook, check_feasible, classify_editor_output
from .metrics import TraceMetrics, compute_metrics, read_trace
from .program_model import TagConfig, TaggedProgram

logger = logging.getLogger(__name__)

BROKEN_MARKER = "@@BROKEN@@"
INTERFACE_SYMBOL = "def build_model"

DEFAULT_SIM_SEED = '''"""Message-passing candidate evolved by the search engine."""

HIDDEN_DIM = 128

# <SPARK:OPERATOR>
def make_operator(dim):
    proj = [[1.0 if i == j else 0.0 for j in range(dim)] for i in range(dim)]
    gain = [1.0] * dim
    return proj, gain
# </SPARK:OPERATOR>


def build_model(dim=HIDDEN_DIM):
    proj, gate = make_operator(dim)
    return proj, gate


# <SPARK:ACTION>
def forward(state, adj, proj, gate):
    out = matmul(state, proj)
    out = out * gate
    return out
# </SPARK:ACTION>


def evaluate_contract(state, adj):
    proj, gate = build_model()
    return forward(state, adj, proj, gate)
'''


@dataclass(frozen=True)
class ValidityRow:
    k: int
    trials: int
    measured: float
    analytic: float


def validity_table(
    p_v: float,
    ks: tuple[int, ...] = (1, 2),
    trials: int = 2000,
    seed: int = 0,
    tags: TagConfig | None = None,
) -> list[ValidityRow]:
    """Measured pass rate of k-scope edits against the analytic p_v ** k column.

    Edits are fabricated by the mock editor and pushed through the real
    normalize/parse/diff/hook pipeline with locality enforcement off, so the
    measured column reflects the engine's own feasibility machinery.
    """
    tags = tags or TagConfig()
    parent = TaggedProgram.parse(DEFAULT_SIM_SEED, tags)
    hooks = (ValidatorHook(kind=HookKind.SYNTAX, forbid_substring=BROKEN_MARKER),)
    rows: list[ValidityRow] = []
    for k in ks:
        backend = StochasticEditorBackend(
            StochasticConfig(p_v=p_v, seed=seed + k, scaffold_break_prob=0.0),
            tags,
        )
        passes = 0
        for _ in range(trials):
            request = ChatRequest(
                role_id=Role.EDIT,
                messages=(),
                metadata=make_edit_metadata(parent, style="scoped_k", k=k),
            )
            child_text = classify_editor_output(backend.complete(request).text, tags)
            if child_text is None:
                continue
            report = check_feasible(parent, child_text, None, hooks, tags, enforce_locality=False)
            if report.passed:
                passes += 1
        rows.append(
            ValidityRow(k=k, trials=trials, measured=passes / trials, analytic=p_v**k)
        )
    return rows


def simulation_config(
    mode: str,
    seed: int,
    attempts: int,
    p_v: float,
    entangle_prob: float,
    scaffold_break_prob: float = 1.0,
    disobey_prob: float = 0.0,
) -> RunConfig:
    """A fully in-process run configuration (stochastic editor + synthetic task)."""
    config = RunConfig()
    config.run.mode = mode
    config.run.seed = seed
    config.run.attempt_cap = attempts
    config.run.budget = attempts + 1
    config.backend.kind = "stochastic"
    config.backend.p_v = p_v
    config.backend.entangle_prob = entangle_prob
    config.backend.scaffold_break_prob = scaffold_break_prob
    config.backend.disobey_prob = disobey_prob
    config.evaluator.kind = "synthetic"
    config.hooks = [
        HookConfig(kind="SYNTAX", forbid_substring=BROKEN_MARKER),
        HookConfig(kind="INTERFACE", required_symbols=[INTERFACE_SYMBOL]),
    ]
    problems = config.validate()
    if problems:
        raise AssertionError(f"internal simulation config invalid: {problems}")
    return config


@dataclass(frozen=True)
class ModeGapResult:
    seed: int
    spark_valid_rate: float
    freeform_valid_rate: float
    spark_best: float | None
    freeform_best: float | None
    spark_trace: Path
    freeform_trace: Path

    @property
    def gap(self) -> float:
        return self.spark_valid_rate - self.freeform_valid_rate


def run_simulated_search(
    mode: str,
    seed: int,
    attempts: int,
    p_v: float,
    entangle_prob: float,
    out_dir: Path,
    scaffold_break_prob: float = 1.0,
    disobey_prob: float = 0.0,
) -> tuple[Path, TraceMetrics]:
    """One full engine run under the stochastic editor; returns trace + metrics."""
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"{mode.lower()}_seed{seed}.jsonl"
    checkpoint_path = out_dir / f"{mode.lower()}_seed{seed}.checkpoint.json"
    config = simulation_config(
        mode, seed, attempts, p_v, entangle_prob, scaffold_break_prob, disobey_prob
    )
    runner = build_runner(config, trace_path, checkpoint_path)
    runner.run(DEFAULT_SIM_SEED)
    return trace_path, compute_metrics(read_trace(trace_path))


def mode_gap(
    p_v: float,
    entangle_prob: float,
    attempts: int,
    seeds: tuple[int, ...],
    out_dir: Path,
    scaffold_break_prob: float = 1.0,
    disobey_prob: float = 0.0,
) -> list[ModeGapResult]:
    """Factor-scoped vs free-form cumulative valid rate under one mock profile."""
    results: list[ModeGapResult] = []
    for seed in seeds:
        spark_trace, spark_metrics = run_simulated_search(
            "SPARK", seed, attempts, p_v, entangle_prob, out_dir, scaffold_break_prob, disobey_prob
        )
        free_trace, free_metrics = run_simulated_search(
            "FREEFORM", seed, attempts, p_v, entangle_prob, out_dir, scaffold_break_prob, disobey_prob
        )
        spark_rate = spark_metrics.series.rows[-1].cumulative_valid_rate if spark_metrics.series.rows else 0.0
        free_rate = free_metrics.series.rows[-1].cumulative_valid_rate if free_metrics.series.rows else 0.0
        results.append(
            ModeGapResult(
                seed=seed,
                spark_valid_rate=spark_rate,
                freeform_valid_rate=free_rate,
                spark_best=spark_metrics.best_fitness,
                freeform_best=free_metrics.best_fitness,
                spark_trace=spark_trace,
                freeform_trace=free_trace,
            )
        )
    return results
