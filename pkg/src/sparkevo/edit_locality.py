"""Line-based edit sets between parent and offspring, and factor-locality verdicts.

The diff is a longest-common-subsequence alignment over normalized lines with a
deterministic tie-break (ties consume parent lines first), so verdicts are
reproducible for fixed inputs.  Locality is decided by a two-sided rule: line
attribution must stay inside the selected region, and the non-selected region
body plus all frozen scaffolding must be byte-identical after normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

from .program_model import Factor, RegionMap, TaggedProgram

FROZEN = "FROZEN"


@dataclass(frozen=True)
class EditSet:
    """Aligned line-level difference between parent and child."""

    changed_parent_lines: frozenset[int]
    changed_child_lines: frozenset[int]
    hunks: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    @property
    def empty(self) -> bool:
        return not self.changed_parent_lines and not self.changed_child_lines


@dataclass(frozen=True)
class LocalityVerdict:
    """Outcome of the factor-locality check for one parent/child pair."""

    is_factor_local: bool
    touched_regions: frozenset[str]
    entangled: bool
    parse_failure: bool = False


def parse_failure_verdict() -> LocalityVerdict:
    """A tag-breaking child: scaffolding-touching by definition."""
    return LocalityVerdict(
        is_factor_local=False,
        touched_regions=frozenset({FROZEN}),
        entangled=True,
        parse_failure=True,
    )


def _lcs_match_pairs(a: tuple[str, ...], b: tuple[str, ...]) -> list[tuple[int, int]]:
    """Matched (parent, child) index pairs of one LCS alignment.

    dp[i][j] holds the LCS length of a[i:], b[j:].  Backtracking matches equal
    heads greedily (always length-optimal) and on dp ties advances the parent
    side first, which yields the earliest alignment.
    """
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = dp[i], dp[i + 1]
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = below[j] if below[j] >= row[j + 1] else row[j + 1]
    pairs: list[tuple[int, int]] = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] >= dp[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def diff(parent: TaggedProgram, child: TaggedProgram) -> EditSet:
    """Minimal line-level EditSet under the LCS alignment; total and deterministic."""
    return diff_lines(parent.normalized_lines, child.normalized_lines)


def diff_lines(a: tuple[str, ...], b: tuple[str, ...]) -> EditSet:
    pairs = _lcs_match_pairs(a, b)
    matched_a = {i for i, _ in pairs}
    matched_b = {j for _, j in pairs}
    changed_a = frozenset(i for i in range(len(a)) if i not in matched_a)
    changed_b = frozenset(j for j in range(len(b)) if j not in matched_b)

    hunks: list[tuple[tuple[int, int], tuple[int, int]]] = []
    prev_a = prev_b = 0
    for i, j in pairs + [(len(a), len(b))]:
        if i > prev_a or j > prev_b:
            hunks.append(((prev_a, i), (prev_b, j)))
        prev_a, prev_b = i + 1, j + 1
    return EditSet(changed_a, changed_b, tuple(hunks))


def attribute(edit: EditSet, parent_map: RegionMap, child_map: RegionMap) -> frozenset[str]:
    """Two-sided region attribution: changed parent lines map through the parent's
    spans, inserted/replaced child lines through the child's."""
    touched: set[str] = set()
    for i in edit.changed_parent_lines:
        touched.add(parent_map.region_of(i))
    for j in edit.changed_child_lines:
        touched.add(child_map.region_of(j))
    return frozenset(touched)


def _preserved(parent: TaggedProgram, child: TaggedProgram, factor: Factor) -> bool:
    """Non-selected region body and all frozen spans byte-identical to the parent."""
    other = Factor.ACTION if factor is Factor.OPERATOR else Factor.OPERATOR
    return (
        child.region_text(other) == parent.region_text(other)
        and child.frozen_text() == parent.frozen_text()
        and child.final_newline == parent.final_newline
    )


def check_factor_local(
    parent: TaggedProgram,
    child: TaggedProgram,
    selected: Factor | None,
) -> LocalityVerdict:
    """Decide factor-locality of the child's edit relative to the parent.

    With selected=None (free-form audits) the edit counts as factor-local when
    it would be local for some single factor.
    """
    edit = diff(parent, child)
    touched = attribute(edit, parent.region_map, child.region_map)
    if parent.final_newline != child.final_newline:
        touched = touched | {FROZEN}
    entangled = (Factor.OPERATOR.value in touched and Factor.ACTION.value in touched) or (
        FROZEN in touched
    )

    if selected is not None:
        local = touched <= {selected.value} and _preserved(parent, child, selected)
    else:
        local = any(
            touched <= {factor.value} and _preserved(parent, child, factor)
            for factor in Factor
        )
    return LocalityVerdict(is_factor_local=local, touched_regions=touched, entangled=entangled)


@dataclass(frozen=True)
class EntanglementSummary:
    """Aggregate entanglement over a verdict sequence; empty input pins rate to 0."""

    total: int
    entangled: int

    @property
    def rate(self) -> float:
        return self.entangled / self.total if self.total else 0.0

    @property
    def empty(self) -> bool:
        return self.total == 0


def entanglement_rate(verdicts: list[LocalityVerdict] | tuple[LocalityVerdict, ...]) -> EntanglementSummary:
    return EntanglementSummary(
        total=len(verdicts),
        entangled=sum(1 for v in verdicts if v.entangled),
    )
