"""Run configuration: one TOML tree, validated field by field.

Secrets never live in the file; the backend API key is read from the
environment variable named by `backend.api_key_env`.  Every default matches
the shipped experiment harness values and every field is overridable.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .archive import BinningSpec, IslandArchive
from .backend import (
    ChatBackend,
    HttpChatBackend,
    Role,
    ScriptedBackend,
    StochasticConfig,
    StochasticEditorBackend,
)
from .evaluator import CommandEvaluator, EvaluatorSpec, SyntheticEvaluator, SyntheticTask
from .feasibility import HookKind, ValidatorHook
from .operators import DecodingConfig, PromptTemplates, SparkOperators
from .program_model import TagConfig
from .search import LogicalClock, LoopSettings, RunMode, SearchRunner, WallClock


class ConfigError(Exception):
    """Invalid configuration; the message lists every invalid field."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class BackendConfig:
    kind: str = "http"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "SPARKEVO_API_KEY"
    temperature: float = 0.7
    max_tokens: int = 4096
    request_timeout: float = 120.0
    retry_budget: int = 3
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    script_path: str = ""
    p_v: float = 0.8
    entangle_prob: float = 0.5
    scaffold_break_prob: float = 1.0
    disobey_prob: float = 0.0


@dataclass
class EvaluatorConfig:
    kind: str = "synthetic"
    command: str = ""
    timeout_full: float = 3600.0
    timeout_prelim: float = 600.0
    workdir: str = ""
    env_passthrough: list[str] = field(default_factory=list)
    target_token: str = "gate"
    per_hit: float = 0.04
    line_cap: int = 60
    line_penalty: float = 0.01
    macs_per_line: int = 12000
    jitter: float = 0.0


@dataclass
class ArchiveConfig:
    islands: int = 5
    population_cap: int = 100
    archive_cap: int = 100
    migration_period: int = 10
    fitness_bins: int = 10
    fitness_range: tuple[float, float] = (0.0, 1.0)
    macs_bins: int = 8
    macs_range: tuple[float, float] = (1e5, 1e7)
    top_inspirations: int = 5
    diverse_inspirations: int = 5


@dataclass
class HookConfig:
    kind: str
    command: str = ""
    timeout: float = 30.0
    forbid_substring: str = ""
    required_symbols: list[str] = field(default_factory=list)


@dataclass
class PromptConfig:
    route: str = ""
    directive: str = ""
    edit: str = ""
    freeform: str = ""
    system: str = ""


@dataclass
class RunSection:
    mode: str = "SPARK"
    budget: int = 100
    attempt_cap: int | None = 100
    seed: int = 0
    seed_program: str = ""
    out_dir: str = "runs/out"
    k: int = 3
    k_prime: int = 10
    r_asr: int = 3
    checkpoint_every: int = 10
    cascade_enabled: bool = True
    cascade_threshold: float = -100.0
    directive_char_limit: int = 500
    inspiration_char_budget: int = 4000


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    archive: ArchiveConfig = field(default_factory=ArchiveConfig)
    tags: TagConfig = field(default_factory=TagConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    hooks: list[HookConfig] = field(default_factory=list)

    def validate(self) -> list[str]:
        problems: list[str] = []
        run = self.run
        if run.mode not in {m.value for m in RunMode}:
            problems.append(f"run.mode: unknown mode {run.mode!r}")
        if run.budget < 1:
            problems.append("run.budget: must be >= 1")
        if run.attempt_cap is not None and run.attempt_cap < 0:
            problems.append("run.attempt_cap: must be >= 0")
        if run.k < 1:
            problems.append("run.k: must be >= 1")
        if run.k_prime < 1:
            problems.append("run.k_prime: must be >= 1")
        if run.r_asr < 1:
            problems.append("run.r_asr: must be >= 1")
        if run.checkpoint_every < 0:
            problems.append("run.checkpoint_every: must be >= 0")

        arc = self.archive
        if arc.islands < 1:
            problems.append("archive.islands: must be >= 1")
        if arc.population_cap < 1:
            problems.append("archive.population_cap: must be >= 1")
        if arc.archive_cap < 1:
            problems.append("archive.archive_cap: must be >= 1")
        if arc.migration_period < 1:
            problems.append("archive.migration_period: must be >= 1")
        if arc.fitness_bins < 1:
            problems.append("archive.fitness_bins: must be >= 1")
        if arc.macs_bins < 1:
            problems.append("archive.macs_bins: must be >= 1")
        if arc.fitness_range[0] >= arc.fitness_range[1]:
            problems.append("archive.fitness_range: must be increasing")
        if arc.macs_range[0] >= arc.macs_range[1] or arc.macs_range[0] <= 0:
            problems.append("archive.macs_range: must be positive and increasing")
        if arc.top_inspirations < 0:
            problems.append("archive.top_inspirations: must be >= 0")
        if arc.diverse_inspirations < 0:
            problems.append("archive.diverse_inspirations: must be >= 0")

        seen_tags = set()
        for name, value in (
            ("operator_open", self.tags.operator_open),
            ("operator_close", self.tags.operator_close),
            ("action_open", self.tags.action_open),
            ("action_close", self.tags.action_close),
        ):
            if not value.strip():
                problems.append(f"tags.{name}: must be non-empty")
            if value in seen_tags:
                problems.append(f"tags.{name}: duplicates another tag string")
            seen_tags.add(value)

        be = self.backend
        if be.kind not in ("http", "scripted", "stochastic"):
            problems.append(f"backend.kind: unknown kind {be.kind!r}")
        if be.kind == "http" and not be.endpoint:
            problems.append("backend.endpoint: required for the http backend")
        if be.kind == "scripted" and not be.script_path:
            problems.append("backend.script_path: required for the scripted backend")
        if be.temperature < 0:
            problems.append("backend.temperature: must be >= 0")
        if be.retry_budget < 0:
            problems.append("backend.retry_budget: must be >= 0")
        if not 0.0 < be.p_v <= 1.0:
            problems.append("backend.p_v: must be in (0, 1]")
        for name in ("entangle_prob", "scaffold_break_prob", "disobey_prob"):
            value = getattr(be, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"backend.{name}: must be in [0, 1]")

        ev = self.evaluator
        if ev.kind not in ("command", "synthetic"):
            problems.append(f"evaluator.kind: unknown kind {ev.kind!r}")
        if ev.kind == "command" and not ev.command:
            problems.append("evaluator.command: required for the command evaluator")
        if ev.timeout_full <= 0 or ev.timeout_prelim <= 0:
            problems.append("evaluator.timeout_full/timeout_prelim: must be > 0")
        if ev.per_hit < 0 or ev.line_penalty < 0 or ev.macs_per_line < 1:
            problems.append("evaluator.synthetic: per_hit/line_penalty >= 0, macs_per_line >= 1")

        for i, hook in enumerate(self.hooks):
            if hook.kind not in {k.value for k in HookKind}:
                problems.append(f"hooks[{i}].kind: unknown kind {hook.kind!r}")
            if hook.timeout <= 0:
                problems.append(f"hooks[{i}].timeout: must be > 0")
            if not hook.command and not hook.forbid_substring and not hook.required_symbols:
                problems.append(f"hooks[{i}]: needs a command, forbid_substring or required_symbols")
        return problems


def _apply(section: dict, target) -> list[str]:
    problems = []
    for key, value in section.items():
        if not hasattr(target, key):
            problems.append(f"unknown field {key!r}")
            continue
        current = getattr(target, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(target, key, value)
    return problems


def parse_config(data: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML tree, validating everything."""
    config = RunConfig()
    problems: list[str] = []
    known = {"run", "archive", "tags", "prompts", "backend", "evaluator", "hooks"}
    for section in data:
        if section not in known:
            problems.append(f"{section}: unknown section")

    problems += [f"run.{p}" for p in _apply(data.get("run", {}), config.run)]
    arc_section = dict(data.get("archive", {}))
    problems += [f"archive.{p}" for p in _apply(arc_section, config.archive)]
    tag_section = data.get("tags", {})
    tag_values = {
        key: tag_section.get(key, getattr(config.tags, key))
        for key in ("operator_open", "operator_close", "action_open", "action_close")
    }
    for key in tag_section:
        if key not in tag_values:
            problems.append(f"tags.{key}: unknown field")
    config.tags = TagConfig(**tag_values)
    problems += [f"prompts.{p}" for p in _apply(data.get("prompts", {}), config.prompts)]
    backend_section = dict(data.get("backend", {}))
    problems += [f"backend.{p}" for p in _apply(backend_section, config.backend)]
    evaluator_section = dict(data.get("evaluator", {}))
    synthetic = evaluator_section.pop("synthetic", {})
    problems += [f"evaluator.{p}" for p in _apply(evaluator_section, config.evaluator)]
    problems += [f"evaluator.synthetic.{p}" for p in _apply(synthetic, config.evaluator)]
    for i, hook_data in enumerate(data.get("hooks", [])):
        hook = HookConfig(kind=hook_data.get("kind", ""))
        hook_rest = {k: v for k, v in hook_data.items() if k != "kind"}
        problems += [f"hooks[{i}].{p}" for p in _apply(hook_rest, hook)]
        config.hooks.append(hook)

    problems += config.validate()
    if problems:
        raise ConfigError(problems)
    return config


def load_config(path: str | Path) -> RunConfig:
    raw = Path(path).read_bytes()
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError([f"TOML parse error: {exc}"]) from exc
    return parse_config(data)


# -- component assembly -------------------------------------------------------


def build_tags(config: RunConfig) -> TagConfig:
    return config.tags


def build_hooks(config: RunConfig) -> tuple[ValidatorHook, ...]:
    hooks = []
    for hook in config.hooks:
        hooks.append(
            ValidatorHook(
                kind=HookKind(hook.kind),
                command=hook.command or None,
                timeout=hook.timeout,
                required_symbols=tuple(hook.required_symbols),
                forbid_substring=hook.forbid_substring or None,
            )
        )
    return tuple(hooks)


def build_backend(config: RunConfig) -> ChatBackend:
    be = config.backend
    if be.kind == "http":
        return HttpChatBackend(
            endpoint=be.endpoint,
            model=be.model,
            api_key=os.environ.get(be.api_key_env),
            backoff_base=be.backoff_base,
            backoff_factor=be.backoff_factor,
        )
    if be.kind == "scripted":
        data = json.loads(Path(be.script_path).read_text(encoding="utf-8"))
        queues = {Role(name): list(items) for name, items in data.items()}
        return ScriptedBackend(queues)
    symbols: list[str] = []
    for hook in config.hooks:
        symbols.extend(hook.required_symbols)
    return StochasticEditorBackend(
        StochasticConfig(
            p_v=be.p_v,
            entangle_prob=be.entangle_prob,
            scaffold_break_prob=be.scaffold_break_prob,
            disobey_prob=be.disobey_prob,
            seed=config.run.seed,
            target_token=config.evaluator.target_token,
            interface_symbols=tuple(symbols),
        ),
        config.tags,
    )


def build_evaluator(config: RunConfig):
    ev = config.evaluator
    if ev.kind == "command":
        return CommandEvaluator(
            EvaluatorSpec(
                command=ev.command,
                timeout_full=ev.timeout_full,
                timeout_prelim=ev.timeout_prelim,
                workdir=ev.workdir or None,
                env_passthrough=tuple(ev.env_passthrough),
            )
        )
    return SyntheticEvaluator(
        SyntheticTask(
            target_token=ev.target_token,
            per_hit=ev.per_hit,
            line_cap=ev.line_cap,
            line_penalty=ev.line_penalty,
            macs_per_line=ev.macs_per_line,
            jitter=ev.jitter,
            seed=config.run.seed,
        ),
        config.tags,
    )


def build_archive(config: RunConfig) -> IslandArchive:
    arc = config.archive
    return IslandArchive(
        spec=BinningSpec.build(
            fitness_bins=arc.fitness_bins,
            fitness_range=arc.fitness_range,
            macs_bins=arc.macs_bins,
            macs_range=arc.macs_range,
        ),
        islands=arc.islands,
        population_cap=arc.population_cap,
        archive_cap=arc.archive_cap,
    )


def deterministic_components(config: RunConfig) -> bool:
    """True when no subprocess or network is involved, so a logical clock keeps
    traces bit-reproducible."""
    if config.backend.kind == "http":
        return False
    if config.evaluator.kind == "command":
        return False
    return all(not hook.command for hook in config.hooks)


def build_runner(
    config: RunConfig,
    trace_path: str | Path,
    checkpoint_path: str | Path | None = None,
) -> SearchRunner:
    templates = PromptTemplates.load(
        route_path=config.prompts.route or None,
        directive_path=config.prompts.directive or None,
        edit_path=config.prompts.edit or None,
        freeform_path=config.prompts.freeform or None,
        system_prompt=config.prompts.system or None,
    )
    operators = SparkOperators(
        backend=build_backend(config),
        templates=templates,
        tags=config.tags,
        decoding=DecodingConfig(
            temperature=config.backend.temperature,
            max_tokens=config.backend.max_tokens,
            request_timeout=config.backend.request_timeout,
            retry_budget=config.backend.retry_budget,
        ),
        directive_char_limit=config.run.directive_char_limit,
        inspiration_char_budget=config.run.inspiration_char_budget,
    )
    settings = LoopSettings(
        mode=RunMode(config.run.mode),
        budget=config.run.budget,
        attempt_cap=config.run.attempt_cap,
        k=config.run.k,
        k_prime=config.run.k_prime,
        r_asr=config.run.r_asr,
        migration_period=config.archive.migration_period,
        checkpoint_every=config.run.checkpoint_every,
        cascade_enabled=config.run.cascade_enabled,
        cascade_threshold=config.run.cascade_threshold,
        top_inspirations=config.archive.top_inspirations,
        diverse_inspirations=config.archive.diverse_inspirations,
        seed=config.run.seed,
    )
    clock = LogicalClock() if deterministic_components(config) else WallClock()
    return SearchRunner(
        settings=settings,
        operators=operators,
        evaluator=build_evaluator(config),
        hooks=build_hooks(config),
        archive=build_archive(config),
        tags=config.tags,
        trace_path=trace_path,
        checkpoint_path=checkpoint_path,
        clock=clock,
    )
