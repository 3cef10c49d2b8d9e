"""Islanded MAP-Elites archive over (fitness, MACs) descriptors.

Cells are keyed by discretized descriptors; each island keeps at most one
elite per cell.  Replacement is strictly by higher fitness, with equal fitness
broken by lower MACs.  Islands exchange their best elite along a ring every
migration period.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass

INSERTED = "INSERTED"
REPLACED = "REPLACED"
REJECTED = "REJECTED"
NAN_REJECTED = "NAN_REJECTED"


class ArchiveError(Exception):
    pass


@dataclass(frozen=True)
class Descriptor:
    """Evaluator output: primary fitness plus resource descriptors."""

    fitness: float
    macs: int
    params: int | None = None

    def __post_init__(self) -> None:
        if self.macs < 0:
            raise ValueError(f"macs must be >= 0, got {self.macs}")
        if self.params is not None and self.params < 0:
            raise ValueError(f"params must be >= 0, got {self.params}")


@dataclass(frozen=True)
class BinningSpec:
    """Per-dimension bin edges: uniform over fitness, logarithmic over MACs."""

    fitness_edges: tuple[float, ...]
    macs_edges: tuple[float, ...]

    @classmethod
    def build(
        cls,
        fitness_bins: int = 10,
        fitness_range: tuple[float, float] = (0.0, 1.0),
        macs_bins: int = 8,
        macs_range: tuple[float, float] = (1e5, 1e7),
    ) -> "BinningSpec":
        lo, hi = fitness_range
        fitness_edges = tuple(lo + (hi - lo) * i / fitness_bins for i in range(fitness_bins + 1))
        log_lo, log_hi = math.log10(macs_range[0]), math.log10(macs_range[1])
        macs_edges = tuple(
            10 ** (log_lo + (log_hi - log_lo) * i / macs_bins) for i in range(macs_bins + 1)
        )
        return cls(fitness_edges=fitness_edges, macs_edges=macs_edges)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.fitness_edges) - 1, len(self.macs_edges) - 1


def _bin_index(edges: tuple[float, ...], value: float) -> int:
    """Bin index with out-of-range values clamped to the edge bins."""
    index = bisect.bisect_right(edges, value) - 1
    return max(0, min(index, len(edges) - 2))


def bin_key(descriptor: Descriptor, spec: BinningSpec) -> tuple[int, int]:
    """Discretized cell key; NaN fitness is never archivable."""
    if math.isnan(descriptor.fitness):
        raise ValueError("NaN fitness cannot be binned")
    return (
        _bin_index(spec.fitness_edges, descriptor.fitness),
        _bin_index(spec.macs_edges, float(descriptor.macs)),
    )


@dataclass
class CellElite:
    digest: str
    descriptor: Descriptor
    replacements: int = 0


@dataclass(frozen=True)
class Elite:
    """An archived elite with its location, for sampling and reporting."""

    island: int
    key: tuple[int, int]
    digest: str
    descriptor: Descriptor


def _improves(new: Descriptor, incumbent: Descriptor) -> bool:
    if new.fitness > incumbent.fitness:
        return True
    return new.fitness == incumbent.fitness and new.macs < incumbent.macs


def _eviction_order(elite: Elite) -> tuple[float, int, str]:
    # Lowest fitness evicted first, then highest MACs, then highest digest.
    return (elite.descriptor.fitness, -elite.descriptor.macs, elite.digest)


class IslandArchive:
    """MAP-Elites cells per island plus a shared program-text store."""

    def __init__(
        self,
        spec: BinningSpec,
        islands: int = 5,
        population_cap: int = 100,
        archive_cap: int = 100,
    ):
        if islands < 1:
            raise ArchiveError("need at least one island")
        self.spec = spec
        self.island_count = islands
        self.population_cap = population_cap
        self.archive_cap = archive_cap
        self._islands: list[dict[tuple[int, int], CellElite]] = [{} for _ in range(islands)]
        self._programs: dict[str, str] = {}
        self._cursor = 0

    # -- queries -------------------------------------------------------------

    def __len__(self) -> int:
        return sum(len(cells) for cells in self._islands)

    def all_elites(self) -> list[Elite]:
        elites: list[Elite] = []
        for island, cells in enumerate(self._islands):
            for key in sorted(cells):
                cell = cells[key]
                elites.append(Elite(island, key, cell.digest, cell.descriptor))
        return elites

    def island_elites(self, island: int) -> list[Elite]:
        cells = self._islands[island]
        return [Elite(island, key, cells[key].digest, cells[key].descriptor) for key in sorted(cells)]

    def program_text(self, digest: str) -> str:
        return self._programs[digest]

    def best(self) -> Elite:
        """Global argmax by fitness, tie-broken by lower MACs then digest order."""
        elites = self.all_elites()
        if not elites:
            raise ArchiveError("archive is empty")
        return min(elites, key=lambda e: (-e.descriptor.fitness, e.descriptor.macs, e.digest))

    # -- insertion -----------------------------------------------------------

    def try_insert(self, island: int, digest: str, descriptor: Descriptor) -> str:
        """Cell-level elite rule: INSERTED into an empty cell, REPLACED on strict
        improvement (fitness, then lower MACs), otherwise REJECTED."""
        key = bin_key(descriptor, self.spec)
        cells = self._islands[island]
        incumbent = cells.get(key)
        if incumbent is None:
            cells[key] = CellElite(digest=digest, descriptor=descriptor)
            return INSERTED
        if _improves(descriptor, incumbent.descriptor):
            cells[key] = CellElite(
                digest=digest, descriptor=descriptor, replacements=incumbent.replacements + 1
            )
            return REPLACED
        return REJECTED

    def add(self, island: int, digest: str, descriptor: Descriptor, program_text: str) -> str:
        """try_insert plus program storage and cap enforcement."""
        try:
            bin_key(descriptor, self.spec)
        except ValueError:
            return NAN_REJECTED
        action = self.try_insert(island, digest, descriptor)
        if action in (INSERTED, REPLACED):
            self._programs[digest] = program_text
            self._enforce_caps(island)
            self._prune_programs()
        return action

    def _enforce_caps(self, island: int) -> None:
        cells = self._islands[island]
        while len(cells) > self.population_cap:
            victim = min(self.island_elites(island), key=_eviction_order)
            del cells[victim.key]
        while len(self) > self.archive_cap:
            victim = min(self.all_elites(), key=_eviction_order)
            del self._islands[victim.island][victim.key]

    def _prune_programs(self) -> None:
        live = {cell.digest for cells in self._islands for cell in cells.values()}
        for digest in [d for d in self._programs if d not in live]:
            del self._programs[digest]

    # -- migration -----------------------------------------------------------

    def migrate(self, period: int, iteration: int) -> list[dict]:
        """Ring migration of each island's best elite when iteration % period == 0.

        The source elite is copied, never deleted.  Returns one event per
        attempted transfer.
        """
        if period <= 0 or iteration % period != 0 or self.island_count < 2:
            return []
        # Snapshot sources (including program text) first: an earlier transfer
        # may replace a later source in its destination cell and prune its text.
        sources: list[tuple[int, Elite, str]] = []
        for island in range(self.island_count):
            elites = self.island_elites(island)
            if elites:
                best = min(elites, key=lambda e: (-e.descriptor.fitness, e.descriptor.macs, e.digest))
                sources.append((island, best, self._programs[best.digest]))
        events: list[dict] = []
        for island, elite, text in sources:
            dest = (island + 1) % self.island_count
            action = self.add(dest, elite.digest, elite.descriptor, text)
            events.append(
                {"from": island, "to": dest, "digest": elite.digest, "action": action}
            )
        return events

    # -- sampling ------------------------------------------------------------

    def next_island(self) -> int:
        """Round-robin cursor over non-empty islands."""
        if len(self) == 0:
            raise ArchiveError("archive is empty")
        for offset in range(self.island_count):
            idx = (self._cursor + offset) % self.island_count
            if self._islands[idx]:
                self._cursor = (idx + 1) % self.island_count
                return idx
        raise ArchiveError("archive is empty")

    def sample_parent(self, rng: random.Random, island: int) -> Elite:
        """Half uniform, half fitness-proportional (softmax, unit scale) over the island."""
        elites = self.island_elites(island)
        if not elites:
            raise ArchiveError(f"island {island} is empty")
        if rng.random() < 0.5:
            return rng.choice(elites)
        peak = max(e.descriptor.fitness for e in elites)
        weights = [math.exp(e.descriptor.fitness - peak) for e in elites]
        return rng.choices(elites, weights=weights, k=1)[0]

    def sample_inspirations(self, top_n: int = 5, diverse_n: int = 5) -> list[Elite]:
        """Global top-N by fitness plus N diverse elites (greedy max-min L1 in
        bin-index space), deduplicated by digest."""
        elites = self.all_elites()
        ranked = sorted(elites, key=lambda e: (-e.descriptor.fitness, e.descriptor.macs, e.digest))
        chosen: list[Elite] = []
        seen: set[str] = set()
        for elite in ranked:
            if len(chosen) >= top_n:
                break
            if elite.digest not in seen:
                chosen.append(elite)
                seen.add(elite.digest)

        def min_dist(candidate: Elite) -> int:
            return min(
                abs(candidate.key[0] - c.key[0]) + abs(candidate.key[1] - c.key[1])
                for c in chosen
            )

        for _ in range(diverse_n):
            pool = [e for e in ranked if e.digest not in seen]
            if not pool:
                break
            if not chosen:
                pick = pool[0]
            else:
                pick = min(pool, key=lambda e: (-min_dist(e), e.digest))
            chosen.append(pick)
            seen.add(pick.digest)
        return chosen

    # -- persistence -----------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "islands": [
                [
                    {
                        "key": list(key),
                        "digest": cell.digest,
                        "fitness": cell.descriptor.fitness,
                        "macs": cell.descriptor.macs,
                        "params": cell.descriptor.params,
                        "replacements": cell.replacements,
                    }
                    for key, cell in sorted(cells.items())
                ]
                for cells in self._islands
            ],
            "programs": dict(self._programs),
            "cursor": self._cursor,
        }

    def restore(self, state: dict) -> None:
        self._islands = [
            {
                tuple(entry["key"]): CellElite(
                    digest=entry["digest"],
                    descriptor=Descriptor(
                        fitness=entry["fitness"], macs=entry["macs"], params=entry["params"]
                    ),
                    replacements=entry["replacements"],
                )
                for entry in island
            }
            for island in state["islands"]
        ]
        self._programs = dict(state["programs"])
        self._cursor = state["cursor"]
