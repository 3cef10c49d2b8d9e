"""Normalized, region-tagged program representation.

A candidate program is plain text carrying two editable regions (OPERATOR and
ACTION) delimited by full-line boundary tags.  Everything outside the two
region bodies, including the tag lines themselves, is frozen scaffolding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class Factor(Enum):
    """The discrete intervention target: exactly two admissible values."""

    OPERATOR = "OPERATOR"
    ACTION = "ACTION"


class ProgramError(Exception):
    """Base class for program representation errors."""


class ProgramEncodingError(ProgramError):
    """Raised when a program file is not valid UTF-8."""


class InvalidFactorToken(ProgramError):
    """Raised when a routing token is not one of the two factor names."""

    def __init__(self, token: str):
        super().__init__(f"not a factor token: {token!r}")
        self.token = token


class RegionParseError(ProgramError):
    """A boundary-tag violation: missing, duplicated, unclosed or interleaved tags."""

    MISSING = "missing"
    DUPLICATED = "duplicated"
    UNCLOSED = "unclosed"
    INTERLEAVED = "interleaved"

    def __init__(self, factor: Factor, kind: str, line: int | None = None):
        where = "" if line is None else f" at line {line}"
        super().__init__(f"{kind} {factor.value} tag{where}")
        self.factor = factor
        self.kind = kind
        self.line = line


@dataclass(frozen=True)
class TagConfig:
    """Boundary tag strings; a tag line matches when line.strip() equals the marker."""

    operator_open: str = "# <SPARK:OPERATOR>"
    operator_close: str = "# </SPARK:OPERATOR>"
    action_open: str = "# <SPARK:ACTION>"
    action_close: str = "# </SPARK:ACTION>"

    def all_tags(self) -> tuple[str, str, str, str]:
        return (self.operator_open, self.operator_close, self.action_open, self.action_close)

    def markers_for(self, factor: Factor) -> tuple[str, str]:
        if factor is Factor.OPERATOR:
            return self.operator_open, self.operator_close
        return self.action_open, self.action_close


def normalize(text: str) -> tuple[tuple[str, ...], bool]:
    """Normalize to LF line endings and strip trailing whitespace per line.

    Returns (lines, final_newline).  No other transformation is applied; the
    missing-final-newline case is recorded so serialization is byte-exact.
    """
    if text == "":
        return (), False
    unified = text.replace("\r\n", "\n").replace("\r", "\n")
    final_newline = unified.endswith("\n")
    if final_newline:
        unified = unified[:-1]
    lines = tuple(line.rstrip() for line in unified.split("\n"))
    # A final line left empty by whitespace stripping has no byte content of
    # its own; fold it into the final-newline flag so serialization stays
    # injective and the round trip exact.
    if lines and lines[-1] == "" and not final_newline:
        lines = lines[:-1]
        final_newline = bool(lines)
    return lines, final_newline


def serialize_lines(lines: tuple[str, ...], final_newline: bool) -> str:
    """Inverse of normalize for already-normalized input."""
    if not lines:
        return ""
    return "\n".join(lines) + ("\n" if final_newline else "")


def content_digest(lines: tuple[str, ...], final_newline: bool) -> str:
    """Stable identity of the normalized text (archive key / dedup)."""
    return hashlib.sha256(serialize_lines(lines, final_newline).encode("utf-8")).hexdigest()


def parse_factor_token(text: str) -> Factor:
    """Deterministic factor-token parsing: trim, case-fold, exact match only."""
    token = text.strip().casefold()
    if token == "operator":
        return Factor.OPERATOR
    if token == "action":
        return Factor.ACTION
    raise InvalidFactorToken(text)


def _tag_positions(lines: tuple[str, ...], marker: str) -> list[int]:
    return [i for i, line in enumerate(lines) if line.strip() == marker]


def parse_regions(lines: tuple[str, ...], tags: TagConfig) -> RegionMap:
    """Locate the two region bodies between their boundary tags.

    The body span is half-open and strictly between the tag lines; tag lines
    are frozen.  Any tag-multiset or ordering violation raises RegionParseError,
    never a repair.
    """
    spans: dict[Factor, tuple[int, int]] = {}
    for factor in (Factor.OPERATOR, Factor.ACTION):
        open_marker, close_marker = tags.markers_for(factor)
        opens = _tag_positions(lines, open_marker)
        closes = _tag_positions(lines, close_marker)
        if len(opens) > 1 or len(closes) > 1:
            dup = opens if len(opens) > 1 else closes
            raise RegionParseError(factor, RegionParseError.DUPLICATED, dup[1])
        if not opens and not closes:
            raise RegionParseError(factor, RegionParseError.MISSING)
        if opens and not closes:
            raise RegionParseError(factor, RegionParseError.UNCLOSED, opens[0])
        if closes and not opens:
            raise RegionParseError(factor, RegionParseError.MISSING, closes[0])
        if closes[0] < opens[0]:
            raise RegionParseError(factor, RegionParseError.UNCLOSED, opens[0])
        spans[factor] = (opens[0] + 1, closes[0])

    op_start, op_end = spans[Factor.OPERATOR]
    ac_start, ac_end = spans[Factor.ACTION]
    # Tag lines sit at start-1/end; regions interleave unless one tag block
    # ends strictly before the other begins.
    if not (op_end < ac_start - 1 or ac_end < op_start - 1):
        raise RegionParseError(Factor.ACTION, RegionParseError.INTERLEAVED, ac_start - 1)

    return RegionMap(
        operator_span=spans[Factor.OPERATOR],
        action_span=spans[Factor.ACTION],
        line_count=len(lines),
    )


@dataclass(frozen=True)
class RegionMap:
    """Disjoint body spans for the two factors; the complement is frozen."""

    operator_span: tuple[int, int]
    action_span: tuple[int, int]
    line_count: int
    frozen_spans: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self) -> None:
        bodies = sorted([self.operator_span, self.action_span])
        frozen: list[tuple[int, int]] = []
        cursor = 0
        for start, end in bodies:
            if cursor < start:
                frozen.append((cursor, start))
            cursor = max(cursor, end)
        if cursor < self.line_count:
            frozen.append((cursor, self.line_count))
        object.__setattr__(self, "frozen_spans", tuple(frozen))

    def span_for(self, factor: Factor) -> tuple[int, int]:
        return self.operator_span if factor is Factor.OPERATOR else self.action_span

    def region_of(self, index: int) -> str:
        """Region kind of a line index: 'OPERATOR', 'ACTION' or 'FROZEN'."""
        if self.operator_span[0] <= index < self.operator_span[1]:
            return Factor.OPERATOR.value
        if self.action_span[0] <= index < self.action_span[1]:
            return Factor.ACTION.value
        return "FROZEN"


@dataclass(frozen=True)
class TaggedProgram:
    """Immutable normalized program plus its region map and content digest."""

    raw_text: str
    normalized_lines: tuple[str, ...]
    final_newline: bool
    region_map: RegionMap
    content_digest: str

    @classmethod
    def parse(cls, text: str, tags: TagConfig) -> "TaggedProgram":
        lines, final_newline = normalize(text)
        region_map = parse_regions(lines, tags)
        return cls(
            raw_text=text,
            normalized_lines=lines,
            final_newline=final_newline,
            region_map=region_map,
            content_digest=content_digest(lines, final_newline),
        )

    @classmethod
    def load(cls, path: str | Path, tags: TagConfig) -> "TaggedProgram":
        try:
            text = Path(path).read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProgramEncodingError(f"{path}: not valid UTF-8: {exc}") from exc
        return cls.parse(text, tags)

    def serialize(self) -> str:
        """Normalized text, byte-for-byte reproducible."""
        return serialize_lines(self.normalized_lines, self.final_newline)

    def region_body(self, factor: Factor) -> tuple[str, ...]:
        start, end = self.region_map.span_for(factor)
        return self.normalized_lines[start:end]

    def region_text(self, factor: Factor) -> str:
        return "\n".join(self.region_body(factor))

    def frozen_text(self) -> str:
        parts: list[str] = []
        for start, end in self.region_map.frozen_spans:
            parts.extend(self.normalized_lines[start:end])
        return "\n".join(parts)
