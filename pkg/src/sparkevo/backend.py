"""Chat-completion backends for the three editor roles.

One base model configuration serves all roles in a run; roles differ only in
their prompts.  Besides the OpenAI-compatible HTTP client there is a scripted
backend (fixed response queues) and a stochastic mock editor that fabricates
region edits with configurable per-scope validity, for tests and desk-scale
simulations.
"""

from __future__ import annotations

import enum
import logging
import random
import time
from dataclasses import dataclass, field

import requests

from .program_model import Factor, TagConfig, TaggedProgram, serialize_lines

logger = logging.getLogger(__name__)

_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class Role(enum.Enum):
    ROUTE = "ROUTE"
    DIRECTIVE = "DIRECTIVE"
    EDIT = "EDIT"


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    """Retries exhausted or a permanent transport/API failure."""


class ScriptExhausted(BackendError):
    """A scripted queue ran dry; a test/configuration defect, not a proposal failure."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    """One completion call.  metadata is engine-side context (never sent on the wire)."""

    role_id: Role
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.7
    max_tokens: int = 4096
    request_timeout: float = 120.0
    retry_budget: int = 3
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_ms: float = 0.0
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    attempts: int = 1


class ChatBackend:
    """Interface shared by all backends."""

    def complete(self, request: ChatRequest) -> CompletionResult:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class HttpChatBackend(ChatBackend):
    """OpenAI-compatible chat-completions client with retry/backoff; no streaming."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        backoff_base: float = 0.5,
        backoff_factor: float = 2.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._session = session or requests.Session()

    def complete(self, request: ChatRequest) -> CompletionResult:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error = "no attempt made"
        start = time.monotonic()
        for attempt in range(request.retry_budget + 1):
            if attempt:
                time.sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
            try:
                resp = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=request.request_timeout
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
                logger.warning("backend attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("backend attempt %d failed: %s", attempt + 1, last_error)
                continue
            if resp.status_code != 200:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendUnavailable(f"malformed completion payload: {exc}") from exc
            usage = payload.get("usage") or {}
            return CompletionResult(
                text=text,
                latency_ms=(time.monotonic() - start) * 1000.0,
                prompt_tokens=usage.get("prompt_tokens"),
                completion_tokens=usage.get("completion_tokens"),
                attempts=attempt + 1,
            )
        raise BackendUnavailable(f"retries exhausted ({request.retry_budget}): {last_error}")


class ScriptedBackend(ChatBackend):
    """Fixed per-role response queues; bit-reproducible and call-recording."""

    def __init__(self, queues: dict[Role, list[str]]):
        self._queues = {role: list(items) for role, items in queues.items()}
        self._cursors = {role: 0 for role in self._queues}
        self.calls: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> CompletionResult:
        self.calls.append(request)
        queue = self._queues.get(request.role_id)
        cursor = self._cursors.get(request.role_id, 0)
        if queue is None or cursor >= len(queue):
            raise ScriptExhausted(f"no scripted response left for role {request.role_id.value}")
        self._cursors[request.role_id] = cursor + 1
        return CompletionResult(text=queue[cursor])

    def calls_for(self, role: Role) -> int:
        return sum(1 for call in self.calls if call.role_id is role)

    def state_dict(self) -> dict:
        return {"cursors": {role.value: cur for role, cur in self._cursors.items()}}

    def load_state(self, state: dict) -> None:
        for name, cur in state.get("cursors", {}).items():
            self._cursors[Role(name)] = cur


@dataclass(frozen=True)
class StochasticConfig:
    """Behaviour of the mock editor.

    Each touched scope independently stays executable with probability p_v; a
    broken scope carries a marker line that the simulation's syntax hook
    rejects.  In free-form style an edit is entangled (touches both scopes)
    with probability entangle_prob, and an entangled edit additionally rewrites
    the scaffolding line holding the first interface symbol with probability
    scaffold_break_prob.  disobey_prob makes a factor-scoped edit spill into
    the other region, exercising locality rejection.
    """

    p_v: float = 0.8
    entangle_prob: float = 0.5
    scaffold_break_prob: float = 1.0
    disobey_prob: float = 0.0
    seed: int = 0
    target_token: str = "gate"
    broken_marker: str = "@@BROKEN@@"
    interface_symbols: tuple[str, ...] = ()


class StochasticEditorBackend(ChatBackend):
    """Deterministic-under-seed mock of all three roles.

    EDIT requests must carry metadata: parent_text, style
    ("factor_local" | "freeform" | "scoped_k"), and factor or k as
    appropriate.  The response is a complete program with region tags.
    """

    def __init__(self, config: StochasticConfig, tags: TagConfig):
        self.config = config
        self.tags = tags
        self._rng = random.Random(config.seed)
        self._counter = 0

    # -- role dispatch -----------------------------------------------------

    def complete(self, request: ChatRequest) -> CompletionResult:
        if request.role_id is Role.ROUTE:
            text = self._rng.choice([Factor.OPERATOR.value, Factor.ACTION.value])
        elif request.role_id is Role.DIRECTIVE:
            factor = request.metadata.get("factor") or "program"
            text = f"make one conservative improvement inside the {factor} scope"
        else:
            text = self._edit_response(request.metadata)
        return CompletionResult(text=text)

    def _edit_response(self, metadata: dict) -> str:
        parent = TaggedProgram.parse(metadata["parent_text"], self.tags)
        style = metadata.get("style", "factor_local")
        if style == "factor_local":
            factor = Factor(metadata["factor"])
            scopes = [factor]
            if self._rng.random() < self.config.disobey_prob:
                scopes.append(Factor.ACTION if factor is Factor.OPERATOR else Factor.OPERATOR)
            scaffold_break = False
        elif style == "freeform":
            if self._rng.random() < self.config.entangle_prob:
                scopes = [Factor.OPERATOR, Factor.ACTION]
                scaffold_break = self._rng.random() < self.config.scaffold_break_prob
            else:
                scopes = [self._rng.choice([Factor.OPERATOR, Factor.ACTION])]
                scaffold_break = False
        elif style == "scoped_k":
            k = int(metadata.get("k", 1))
            scopes = [Factor.ACTION] if k <= 1 else [Factor.OPERATOR, Factor.ACTION]
            scaffold_break = False
        else:
            raise ValueError(f"unknown edit style: {style}")
        broken = [self._rng.random() >= self.config.p_v for _ in scopes]
        return self._compose(parent, scopes, broken, scaffold_break)

    # -- edit synthesis ----------------------------------------------------

    def _region_line(self, factor: Factor) -> str:
        self._counter += 1
        if factor is Factor.ACTION:
            return f"    out = out * {self.config.target_token}  # step {self._counter}"
        return f"    tune_{self._counter} = 1.0"

    def _compose(
        self,
        parent: TaggedProgram,
        scopes: list[Factor],
        broken: list[bool],
        scaffold_break: bool,
    ) -> str:
        lines = list(parent.normalized_lines)
        edits: list[tuple[int, str, list[str]]] = []
        for factor, is_broken in zip(scopes, broken):
            insert_at = parent.region_map.span_for(factor)[1]
            new_lines = [self._region_line(factor)]
            if is_broken:
                self._counter += 1
                new_lines.append(f"    {self.config.broken_marker} {self._counter}")
            edits.append((insert_at, "insert", new_lines))
        if scaffold_break:
            target = self._scaffold_target(parent)
            if target is not None:
                self._counter += 1
                edits.append((target, "replace", [f"# drift {self._counter}"]))
        for index, op, new_lines in sorted(edits, key=lambda e: e[0], reverse=True):
            if op == "insert":
                lines[index:index] = new_lines
            else:
                lines[index : index + 1] = new_lines
        return serialize_lines(tuple(lines), parent.final_newline)

    def _scaffold_target(self, parent: TaggedProgram) -> int | None:
        """Frozen line to rewrite: the first one holding an interface symbol,
        else the first non-tag, non-empty frozen line."""
        tag_lines = set(self.tags.all_tags())
        fallback: int | None = None
        for start, end in parent.region_map.frozen_spans:
            for i in range(start, end):
                line = parent.normalized_lines[i]
                if line.strip() in tag_lines or not line.strip():
                    continue
                if fallback is None:
                    fallback = i
                if any(symbol in line for symbol in self.config.interface_symbols):
                    return i
        return fallback

    def state_dict(self) -> dict:
        state = self._rng.getstate()
        return {
            "rng": [state[0], list(state[1]), state[2]],
            "counter": self._counter,
        }

    def load_state(self, state: dict) -> None:
        version, internal, gauss = state["rng"]
        self._rng.setstate((version, tuple(internal), gauss))
        self._counter = state["counter"]


def make_edit_metadata(
    parent: TaggedProgram,
    style: str,
    factor: Factor | None = None,
    k: int | None = None,
) -> dict:
    """Structured edit context consumed by mock backends; HTTP ignores it."""
    metadata: dict = {"parent_text": parent.serialize(), "style": style}
    if factor is not None:
        metadata["factor"] = factor.value
    if k is not None:
        metadata["k"] = k
    return metadata
