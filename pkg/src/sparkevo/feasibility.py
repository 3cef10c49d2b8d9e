"""Staged feasibility pipeline for proposed offspring programs.

Stage order is fixed: tag/template parse, factor-locality, then the syntax /
interface / semantic validator hooks.  The pure stages run before any external
command, and the first failing stage names the typed failure.  Rejected
candidates are discarded, never repaired.
"""

from __future__ import annotations

import enum
import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field

from .edit_locality import LocalityVerdict, check_factor_local, parse_failure_verdict
from .program_model import Factor, RegionParseError, TagConfig, TaggedProgram

logger = logging.getLogger(__name__)

_STDERR_EXCERPT = 400


class FailureType(enum.Enum):
    TAG_VIOLATION = "TAG_VIOLATION"
    NOT_FACTOR_LOCAL = "NOT_FACTOR_LOCAL"
    SYNTAX = "SYNTAX"
    INTERFACE = "INTERFACE"
    SEMANTIC = "SEMANTIC"
    EDITOR_FAIL = "EDITOR_FAIL"
    TIMEOUT = "TIMEOUT"
    # Typed outcome for evaluator subprocess errors; not produced by the
    # feasibility stages themselves.
    EVALUATOR_ERROR = "EVALUATOR_ERROR"


class HookKind(enum.Enum):
    SYNTAX = "SYNTAX"
    INTERFACE = "INTERFACE"
    SEMANTIC = "SEMANTIC"


_HOOK_ORDER = {HookKind.SYNTAX: 0, HookKind.INTERFACE: 1, HookKind.SEMANTIC: 2}
_HOOK_FAILURE = {
    HookKind.SYNTAX: FailureType.SYNTAX,
    HookKind.INTERFACE: FailureType.INTERFACE,
    HookKind.SEMANTIC: FailureType.SEMANTIC,
}


class HookConfigError(Exception):
    """A validator command is missing or not executable; aborts the run."""


@dataclass(frozen=True)
class ValidatorHook:
    """One validation stage.

    `command` is an external command template; the candidate file path is
    appended as the final argument and exit status 0 means pass.  For
    INTERFACE hooks `required_symbols` must appear verbatim in the child's
    frozen spans.  `forbid_substring` is a built-in process-free check used by
    simulations: the candidate fails when the substring occurs anywhere in the
    normalized text.
    """

    kind: HookKind
    command: str | None = None
    timeout: float = 30.0
    required_symbols: tuple[str, ...] = ()
    forbid_substring: str | None = None


@dataclass(frozen=True)
class FeasibilityReport:
    """Result of check_feasible: PASS (outcome None) or the first typed failure."""

    outcome: FailureType | None
    verdict: LocalityVerdict | None
    child: TaggedProgram | None
    detail: str = ""
    hook_stderr: str = ""

    @property
    def passed(self) -> bool:
        return self.outcome is None


def _run_hook_command(hook: ValidatorHook, candidate_path: str) -> tuple[bool, bool, str]:
    """Run one external hook: (passed, timed_out, stderr excerpt)."""
    argv = shlex.split(hook.command or "") + [candidate_path]
    try:
        proc = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=hook.timeout,
        )
    except subprocess.TimeoutExpired:
        return False, True, f"hook timed out after {hook.timeout}s"
    except (FileNotFoundError, PermissionError, OSError) as exc:
        raise HookConfigError(f"{hook.kind.value} hook command failed to start: {exc}") from exc
    if proc.returncode == 0:
        return True, False, ""
    return False, False, (proc.stderr or "")[:_STDERR_EXCERPT]


def _run_hooks(
    child: TaggedProgram,
    hooks: tuple[ValidatorHook, ...],
) -> tuple[FailureType | None, str]:
    """Run hooks in SYNTAX/INTERFACE/SEMANTIC order; first failure wins."""
    ordered = sorted(hooks, key=lambda h: _HOOK_ORDER[h.kind])
    text = child.serialize()
    candidate_path: str | None = None
    try:
        for hook in ordered:
            if hook.kind is HookKind.INTERFACE:
                frozen = child.frozen_text()
                for symbol in hook.required_symbols:
                    if symbol not in frozen:
                        return FailureType.INTERFACE, f"required symbol missing: {symbol!r}"
            if hook.forbid_substring is not None and hook.forbid_substring in text:
                return _HOOK_FAILURE[hook.kind], f"forbidden substring present: {hook.forbid_substring!r}"
            if hook.command:
                if candidate_path is None:
                    fd, candidate_path = tempfile.mkstemp(prefix="sparkevo-candidate-", suffix=".txt")
                    with os.fdopen(fd, "w", encoding="utf-8") as handle:
                        handle.write(text)
                passed, timed_out, stderr = _run_hook_command(hook, candidate_path)
                if timed_out:
                    return FailureType.TIMEOUT, stderr
                if not passed:
                    return _HOOK_FAILURE[hook.kind], stderr
        return None, ""
    finally:
        if candidate_path is not None:
            try:
                os.unlink(candidate_path)
            except OSError:
                pass


def check_feasible(
    parent: TaggedProgram,
    child_text: str,
    selected: Factor | None,
    hooks: tuple[ValidatorHook, ...],
    tags: TagConfig,
    enforce_locality: bool = True,
) -> FeasibilityReport:
    """Run the staged pipeline and return PASS or the first typed failure.

    The locality verdict is always computed for logging; with
    enforce_locality=False (free-form mode) it never rejects by itself, but
    tag violations and hook failures still do.
    """
    try:
        child = TaggedProgram.parse(child_text, tags)
    except RegionParseError as exc:
        return FeasibilityReport(
            outcome=FailureType.TAG_VIOLATION,
            verdict=parse_failure_verdict(),
            child=None,
            detail=str(exc),
        )

    verdict = check_factor_local(parent, child, selected)
    if enforce_locality and not verdict.is_factor_local:
        return FeasibilityReport(
            outcome=FailureType.NOT_FACTOR_LOCAL,
            verdict=verdict,
            child=child,
            detail=f"touched regions: {sorted(verdict.touched_regions)}",
        )

    failure, detail = _run_hooks(child, hooks)
    if failure is not None:
        return FeasibilityReport(
            outcome=failure,
            verdict=verdict,
            child=child,
            detail=detail,
            hook_stderr=detail,
        )
    return FeasibilityReport(outcome=None, verdict=verdict, child=child)


def _fenced_blocks(text: str) -> list[str]:
    """Complete fenced code blocks, in order of appearance."""
    blocks: list[str] = []
    current: list[str] | None = None
    for line in text.split("\n"):
        if line.lstrip().startswith("```"):
            if current is None:
                current = []
            else:
                blocks.append("\n".join(current))
                current = None
        elif current is not None:
            current.append(line)
    return blocks


def has_region_tags(text: str, tags: TagConfig) -> bool:
    """All four boundary tags present as whole (trimmed) lines."""
    stripped = {line.strip() for line in text.replace("\r\n", "\n").replace("\r", "\n").split("\n")}
    return all(tag in stripped for tag in tags.all_tags())


def classify_editor_output(output: str | None, tags: TagConfig) -> str | None:
    """Extract the candidate program from an editor response.

    Prefers the last complete fenced code block; with no complete block the
    whole response is the program.  Missing output or absent region tags means
    the editor failed (returns None).
    """
    if output is None or not output.strip():
        return None
    blocks = _fenced_blocks(output)
    candidate = blocks[-1] if blocks else output
    if not has_region_tags(candidate, tags):
        return None
    return candidate
