"""The three-step editing operator: route, directive, scoped edit.

Each evolution step routes the intervention to one factor (up to R_asr
routing calls, falling back to ACTION), converts recent search signals into a
sanitized directive, and asks for a single-shot scoped edit returning the
complete updated program.  Ablation modes replace routing with a uniform draw
or the directive with a fixed default.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .archive import Descriptor, Elite, IslandArchive
from .backend import ChatBackend, ChatMessage, ChatRequest, Role, make_edit_metadata
from .feasibility import classify_editor_output
from .program_model import Factor, InvalidFactorToken, TagConfig, TaggedProgram, parse_factor_token

logger = logging.getLogger(__name__)

DEFAULT_DIRECTIVE = "make one conservative in-scope improvement"
DEFAULT_SYSTEM_PROMPT = "You are an expert assistant for evolving architecture programs."

_PLACEHOLDER = re.compile(r"\{(PARENT_PROGRAM|PARENT_SCORE|FACTOR|DIRECTIVE|INSPIRATIONS|SIGNALS)\}")


def render_template(template: str, values: dict[str, str]) -> str:
    """Single-pass placeholder substitution; substituted text is never rescanned."""
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), ""), template)


@dataclass(frozen=True)
class PromptTemplates:
    route: str
    directive: str
    edit: str
    freeform: str
    system: str = DEFAULT_SYSTEM_PROMPT

    @classmethod
    def load(
        cls,
        route_path: str | None = None,
        directive_path: str | None = None,
        edit_path: str | None = None,
        freeform_path: str | None = None,
        system_prompt: str | None = None,
    ) -> "PromptTemplates":
        def pick(path: str | None, name: str) -> str:
            if path:
                return Path(path).read_text(encoding="utf-8")
            return resources.files("sparkevo").joinpath(f"prompts/{name}.txt").read_text(
                encoding="utf-8"
            )

        return cls(
            route=pick(route_path, "route"),
            directive=pick(directive_path, "directive"),
            edit=pick(edit_path, "edit"),
            freeform=pick(freeform_path, "freeform"),
            system=system_prompt or DEFAULT_SYSTEM_PROMPT,
        )


@dataclass(frozen=True)
class ProposalSummary:
    """Failure rate and failure-type histogram over the recent proposal window."""

    window: int
    failure_rate: float
    histogram: dict[str, int] = field(default_factory=dict)

    def dominant_types(self) -> list[str]:
        return sorted(self.histogram, key=lambda t: (-self.histogram[t], t))


@dataclass(frozen=True)
class Inspiration:
    digest: str
    fitness: float
    macs: int
    text: str


@dataclass(frozen=True)
class EvolutionContext:
    """Everything the prompts summarize about the current search state."""

    parent: TaggedProgram
    parent_descriptor: Descriptor
    recent_outcomes: tuple[float, ...]
    prior_best: float | None
    inspirations: tuple[Inspiration, ...]
    proposal_summary: ProposalSummary


@dataclass(frozen=True)
class Directive:
    text: str
    factor: Factor | None
    defaulted: bool = False

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class RouteResult:
    factor: Factor
    calls: int
    fallback: bool


@dataclass(frozen=True)
class EditResult:
    child_text: str | None
    response: str
    latency_ms: float = 0.0

    @property
    def failed(self) -> bool:
        return self.child_text is None


@dataclass(frozen=True)
class DecodingConfig:
    """Shared decoding hyperparameters; identical across the three roles by construction."""

    temperature: float = 0.7
    max_tokens: int = 4096
    request_timeout: float = 120.0
    retry_budget: int = 3


def stagnation_improvement(history: tuple[float, ...] | list[float], k: int) -> float:
    """Best-so-far improvement contributed by the last k evaluated candidates."""
    if not history:
        return 0.0
    prefix = list(history[:-k]) if len(history) > k else []
    baseline = max(prefix) if prefix else history[0]
    return max(history) - baseline


def context_improvement(ctx: "EvolutionContext") -> float:
    """stagnation_improvement restated over the windowed context fields."""
    if not ctx.recent_outcomes:
        return 0.0
    if ctx.prior_best is not None:
        return max(max(ctx.recent_outcomes), ctx.prior_best) - ctx.prior_best
    return max(ctx.recent_outcomes) - ctx.recent_outcomes[0]


def build_context(
    archive: IslandArchive,
    parent: Elite,
    ledger,
    q_prop,
    tags: TagConfig,
    top_n: int = 5,
    diverse_n: int = 5,
    k: int = 3,
) -> EvolutionContext:
    """Assemble the evolution context from the archive, budget ledger and
    proposal buffer.  The archive must already hold the evaluated seed."""
    if len(archive) == 0:
        raise ValueError("archive is empty; evaluate and insert the seed first")
    history = tuple(ledger.fitness_history)
    prefix = history[:-k] if len(history) > k else ()
    inspirations = tuple(
        Inspiration(
            digest=e.digest,
            fitness=e.descriptor.fitness,
            macs=e.descriptor.macs,
            text=archive.program_text(e.digest),
        )
        for e in archive.sample_inspirations(top_n=top_n, diverse_n=diverse_n)
    )
    return EvolutionContext(
        parent=TaggedProgram.parse(archive.program_text(parent.digest), tags),
        parent_descriptor=parent.descriptor,
        recent_outcomes=history[-k:],
        prior_best=max(prefix) if prefix else None,
        inspirations=inspirations,
        proposal_summary=q_prop.summary(),
    )


class SparkOperators:
    """Backend-facing implementation of the route/directive/edit steps."""

    def __init__(
        self,
        backend: ChatBackend,
        templates: PromptTemplates,
        tags: TagConfig,
        decoding: DecodingConfig = DecodingConfig(),
        directive_char_limit: int = 500,
        inspiration_char_budget: int = 4000,
    ):
        self.backend = backend
        self.templates = templates
        self.tags = tags
        self.decoding = decoding
        self.directive_char_limit = directive_char_limit
        self.inspiration_char_budget = inspiration_char_budget

    # -- context -------------------------------------------------------------

    def build_context(
        self,
        archive: IslandArchive,
        parent: Elite,
        ledger,
        q_prop,
        top_n: int = 5,
        diverse_n: int = 5,
        k: int = 3,
    ) -> EvolutionContext:
        return build_context(
            archive, parent, ledger, q_prop, self.tags, top_n=top_n, diverse_n=diverse_n, k=k
        )

    # -- prompt assembly -----------------------------------------------------

    def _request(self, role: Role, user_text: str, metadata: dict | None = None) -> ChatRequest:
        return ChatRequest(
            role_id=role,
            messages=(
                ChatMessage(role="system", content=self.templates.system),
                ChatMessage(role="user", content=user_text),
            ),
            temperature=self.decoding.temperature,
            max_tokens=self.decoding.max_tokens,
            request_timeout=self.decoding.request_timeout,
            retry_budget=self.decoding.retry_budget,
            metadata=metadata or {},
        )

    def _inspirations_text(self, ctx: EvolutionContext) -> str:
        if not ctx.inspirations:
            return "(none yet)"
        parts: list[str] = []
        used = 0
        for entry in ctx.inspirations:
            header = f"### candidate {entry.digest[:10]} fitness={entry.fitness:.4f} macs={entry.macs}"
            if used + len(entry.text) <= self.inspiration_char_budget:
                body = entry.text
            else:
                program = TaggedProgram.parse(entry.text, self.tags)
                op = "\n".join(program.region_body(Factor.OPERATOR)[:8])
                ac = "\n".join(program.region_body(Factor.ACTION)[:8])
                body = f"[operator body]\n{op}\n[action body]\n{ac}"
            used += len(body)
            parts.append(f"{header}\n{body}")
        return "\n".join(parts)

    def signals_text(self, ctx: EvolutionContext, k: int = 3) -> str:
        history = list(ctx.recent_outcomes)
        improvement = context_improvement(ctx)
        stagnant = improvement <= 0.0
        summary = ctx.proposal_summary
        dominant = ", ".join(summary.dominant_types()) or "none"
        recent = ", ".join(f"{v:.4f}" for v in history) or "none"
        return (
            f"recent evaluated fitness: [{recent}]; "
            f"best-so-far improvement over last {k} evaluations: {improvement:.4f} "
            f"({'stagnant' if stagnant else 'improving'}); "
            f"proposal failure rate over last {summary.window}: {summary.failure_rate:.2f}; "
            f"dominant failure types: {dominant}"
        )

    def _common_values(self, ctx: EvolutionContext) -> dict[str, str]:
        return {
            "PARENT_PROGRAM": ctx.parent.serialize(),
            "PARENT_SCORE": f"{ctx.parent_descriptor.fitness:.4f}",
            "SIGNALS": self.signals_text(ctx),
            "INSPIRATIONS": self._inspirations_text(ctx),
        }

    # -- ASR -----------------------------------------------------------------

    def asr_route(self, ctx: EvolutionContext, r_asr: int = 3) -> RouteResult:
        """Up to r_asr routing calls; first parseable token wins, else ACTION."""
        user_text = render_template(self.templates.route, self._common_values(ctx))
        for attempt in range(1, r_asr + 1):
            result = self.backend.complete(self._request(Role.ROUTE, user_text))
            try:
                factor = parse_factor_token(result.text)
            except InvalidFactorToken:
                logger.debug("unparseable factor token on routing call %d: %r", attempt, result.text)
                continue
            return RouteResult(factor=factor, calls=attempt, fallback=False)
        return RouteResult(factor=Factor.ACTION, calls=r_asr, fallback=True)

    # -- RC ------------------------------------------------------------------

    def sanitize_directive(self, text: str) -> str:
        """Strip fencing and tag strings, collapse whitespace, enforce the length cap."""
        lines = [line for line in text.split("\n") if not line.lstrip().startswith("```")]
        cleaned = "\n".join(lines)
        for tag in self.tags.all_tags():
            cleaned = cleaned.replace(tag, "")
        cleaned = " ".join(cleaned.split())
        return cleaned[: self.directive_char_limit]

    def rc_directive(self, ctx: EvolutionContext, factor: Factor, k: int = 3) -> Directive:
        values = self._common_values(ctx)
        values["FACTOR"] = factor.value
        user_text = render_template(self.templates.directive, values)
        result = self.backend.complete(
            self._request(Role.DIRECTIVE, user_text, metadata={"factor": factor.value})
        )
        text = self.sanitize_directive(result.text)
        if not text:
            logger.info("empty directive after sanitization; substituting the default")
            return Directive(text=DEFAULT_DIRECTIVE, factor=factor, defaulted=True)
        return Directive(text=text, factor=factor)

    def default_directive(self, factor: Factor | None) -> Directive:
        return Directive(text=DEFAULT_DIRECTIVE, factor=factor, defaulted=True)

    # -- SAR -----------------------------------------------------------------

    def sar_edit(self, ctx: EvolutionContext, factor: Factor, directive: Directive) -> EditResult:
        """Single-shot scoped edit; no retry on failure."""
        if directive.factor is not None and directive.factor is not factor:
            raise ValueError("directive was issued for a different factor")
        values = self._common_values(ctx)
        values["FACTOR"] = factor.value
        values["DIRECTIVE"] = directive.text
        user_text = render_template(self.templates.edit, values)
        metadata = make_edit_metadata(ctx.parent, style="factor_local", factor=factor)
        result = self.backend.complete(self._request(Role.EDIT, user_text, metadata=metadata))
        child = classify_editor_output(result.text, self.tags)
        return EditResult(child_text=child, response=result.text, latency_ms=result.latency_ms)

    def freeform_edit(self, ctx: EvolutionContext) -> EditResult:
        """Holistic single-call edit used by the free-form comparator mode."""
        values = self._common_values(ctx)
        user_text = render_template(self.templates.freeform, values)
        metadata = make_edit_metadata(ctx.parent, style="freeform")
        result = self.backend.complete(self._request(Role.EDIT, user_text, metadata=metadata))
        child = classify_editor_output(result.text, self.tags)
        return EditResult(child_text=child, response=result.text, latency_ms=result.latency_ms)

    def uniform_factor(self, rng: random.Random) -> Factor:
        """Factor draw used when routing is ablated."""
        return rng.choice([Factor.OPERATOR, Factor.ACTION])
