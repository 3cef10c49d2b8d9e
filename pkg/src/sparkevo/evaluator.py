"""Black-box evaluation bridge.

External evaluators are subprocesses speaking a one-object JSON protocol on
stdout; the engine never inspects their internals.  A deterministic synthetic
evaluator ships for tests and desk-scale simulations: it scores target-token
occurrences in the ACTION body with a length penalty, and derives MACs from
line count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

from .archive import Descriptor
from .feasibility import FailureType
from .program_model import Factor, ProgramError, TagConfig, TaggedProgram

logger = logging.getLogger(__name__)

PRELIM = "prelim"
FULL = "full"

_BASE_ENV_KEYS = ("PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR")


@dataclass(frozen=True)
class EvaluationRecord:
    """Eval output for one candidate; PRELIM may carry fitness only."""

    fitness: float
    macs: int | None
    params: int | None
    stage: str

    def descriptor(self) -> Descriptor:
        if self.macs is None:
            raise ValueError("no complete descriptor on a preliminary record")
        return Descriptor(fitness=self.fitness, macs=self.macs, params=self.params)


@dataclass(frozen=True)
class EvalFailure:
    """Typed evaluation failure: TIMEOUT or EVALUATOR_ERROR; never consumes budget."""

    kind: FailureType
    detail: str = ""


@dataclass(frozen=True)
class EvaluatorSpec:
    """External evaluator contract: command gets `--stage prelim|full` plus the
    candidate file path as final argument, exit 0 and a JSON object on stdout."""

    command: str
    timeout_full: float = 3600.0
    timeout_prelim: float = 600.0
    workdir: str | None = None
    env_passthrough: tuple[str, ...] = ()


def _parse_eval_stdout(stdout: str, stage: str) -> EvaluationRecord | EvalFailure:
    payload = None
    try:
        payload = json.loads(stdout.strip())
    except ValueError:
        for line in reversed(stdout.strip().splitlines()):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except ValueError:
                continue
            break
    if not isinstance(payload, dict):
        return EvalFailure(FailureType.EVALUATOR_ERROR, "no JSON object on stdout")
    status = payload.get("status")
    if status == "error":
        return EvalFailure(FailureType.EVALUATOR_ERROR, str(payload.get("type", "unspecified")))
    if status != "ok":
        return EvalFailure(FailureType.EVALUATOR_ERROR, f"unknown status: {status!r}")
    try:
        fitness = float(payload["fitness"])
    except (KeyError, TypeError, ValueError):
        return EvalFailure(FailureType.EVALUATOR_ERROR, "missing or non-numeric fitness")
    descriptors = payload.get("descriptors") or {}
    macs = descriptors.get("macs")
    params = descriptors.get("params")
    if stage == FULL and macs is None:
        return EvalFailure(FailureType.EVALUATOR_ERROR, "full stage must report descriptors.macs")
    if macs is not None:
        macs = int(macs)
    if params is not None:
        params = int(params)
    return EvaluationRecord(fitness=fitness, macs=macs, params=params, stage=stage)


class CommandEvaluator:
    """Runs the external evaluator subprocess per the JSON-on-stdout protocol."""

    def __init__(self, spec: EvaluatorSpec):
        self.spec = spec

    @property
    def deterministic(self) -> bool:
        return False

    def evaluate(self, program_text: str, stage: str) -> EvaluationRecord | EvalFailure:
        timeout = self.spec.timeout_prelim if stage == PRELIM else self.spec.timeout_full
        env = {k: os.environ[k] for k in _BASE_ENV_KEYS if k in os.environ}
        for key in self.spec.env_passthrough:
            if key in os.environ:
                env[key] = os.environ[key]
        fd, path = tempfile.mkstemp(prefix="sparkevo-eval-", suffix=".txt")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(program_text)
            argv = shlex.split(self.spec.command) + ["--stage", stage, path]
            try:
                proc = subprocess.run(
                    argv,
                    capture_output=True,
                    text=True,
                    timeout=timeout,
                    cwd=self.spec.workdir,
                    env=env,
                )
            except subprocess.TimeoutExpired:
                return EvalFailure(FailureType.TIMEOUT, f"evaluator exceeded {timeout}s")
            except (FileNotFoundError, PermissionError, OSError) as exc:
                return EvalFailure(FailureType.EVALUATOR_ERROR, f"failed to start: {exc}")
            if proc.returncode != 0:
                return EvalFailure(
                    FailureType.EVALUATOR_ERROR,
                    f"exit {proc.returncode}: {(proc.stderr or '')[:200]}",
                )
            return _parse_eval_stdout(proc.stdout or "", stage)
        finally:
            try:
                os.unlink(path)
            except OSError:
                pass


@dataclass(frozen=True)
class SyntheticTask:
    """Deterministic scoring rule for the built-in evaluator.

    fitness = clamp(per_hit * target-token hits in the ACTION body
                    - line_penalty * lines over line_cap, 0, 1)
    macs    = macs_per_line * total line count
    A nonzero jitter adds a digest-seeded offset in [-jitter, +jitter].
    """

    target_token: str = "gate"
    per_hit: float = 0.04
    line_cap: int = 60
    line_penalty: float = 0.01
    macs_per_line: int = 12000
    jitter: float = 0.0
    seed: int = 0


def _digest_jitter(digest: str, task: SyntheticTask) -> float:
    raw = hashlib.sha256(f"{digest}:{task.seed}".encode("utf-8")).digest()
    unit = int.from_bytes(raw[:8], "big") / 2**64
    return (2.0 * unit - 1.0) * task.jitter


def synthetic_score(program: TaggedProgram, task: SyntheticTask) -> Descriptor:
    """Apply the synthetic scoring and MACs rules; pure in (program, task)."""
    hits = sum(line.count(task.target_token) for line in program.region_body(Factor.ACTION))
    total_lines = len(program.normalized_lines)
    fitness = task.per_hit * hits - task.line_penalty * max(0, total_lines - task.line_cap)
    if task.jitter > 0.0:
        fitness += _digest_jitter(program.content_digest, task)
    fitness = min(1.0, max(0.0, fitness))
    return Descriptor(fitness=fitness, macs=task.macs_per_line * total_lines, params=None)


class SyntheticEvaluator:
    """In-process deterministic evaluator used by simulations and tests."""

    def __init__(self, task: SyntheticTask, tags: TagConfig):
        self.task = task
        self.tags = tags

    @property
    def deterministic(self) -> bool:
        return True

    def evaluate(self, program_text: str, stage: str) -> EvaluationRecord | EvalFailure:
        try:
            program = TaggedProgram.parse(program_text, self.tags)
        except ProgramError as exc:
            return EvalFailure(FailureType.EVALUATOR_ERROR, f"unparseable candidate: {exc}")
        descriptor = synthetic_score(program, self.task)
        return EvaluationRecord(
            fitness=descriptor.fitness,
            macs=descriptor.macs,
            params=descriptor.params,
            stage=stage,
        )
