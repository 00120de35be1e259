"""
Synthetic block score: weight of newly included attestation flags, sync
participation and slashings, with the base reward factored out.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Final, Iterable, Mapping, Optional, Protocol, Sequence

from ..errors import BlockValidationError, MalformedBlockError
from .chain import DEFAULT_SPEC, ChainSpec, epoch_of
from .duties import DEFAULT_WEIGHTS, Flag, RewardWeights, TARGET_WINDOW, timely_flags

logger = logging.getLogger(__name__)


class CommitteeLookup(Protocol):
    def committee(self, slot: int, index: int) -> tuple[int, ...]:
        """Ordered members of a committee; KeyError when unknown."""
        ...


class StaticCommittees:
    def __init__(self, committees: Mapping[tuple[int, int], Sequence[int]]) -> None:
        self._committees = {key: tuple(members) for key, members in committees.items()}

    def committee(self, slot: int, index: int) -> tuple[int, ...]:
        return self._committees[(slot, index)]

    def update(self, committees: Mapping[tuple[int, int], Sequence[int]]) -> None:
        for key, members in committees.items():
            self._committees[key] = tuple(members)


@dataclass(frozen=True)
class SourceLabel:
    node_id: str
    location: str = ""
    client: str = ""


@dataclass(frozen=True)
class AggregateSummary:
    attested_slot: int
    committee_index: int
    bits: tuple[bool, ...]
    # Whether each claim matches the chain the block builds on.
    source_ok: bool = True
    target_ok: bool = True
    head_ok: bool = True

    @property
    def participants(self) -> int:
        return sum(self.bits)

    def bitstring(self) -> str:
        return "".join("1" if bit else "0" for bit in self.bits)

    @classmethod
    def from_bitstring(cls, attested_slot: int, committee_index: int, bits: str, **claims: bool) -> "AggregateSummary":
        if any(ch not in "01" for ch in bits):
            raise MalformedBlockError(f"participation bits must be 0/1, got {bits!r}")
        return cls(attested_slot, committee_index, tuple(ch == "1" for ch in bits), **claims)


@dataclass(frozen=True)
class BlockSummary:
    slot: int
    proposer_id: int
    parent_root: bytes
    root: bytes
    aggregates: tuple[AggregateSummary, ...] = ()
    sync_participation: int = 0
    attester_slashings: int = 0
    proposer_slashings: int = 0
    source_label: Optional[SourceLabel] = None

    def __post_init__(self) -> None:
        if self.slot < 0:
            raise MalformedBlockError("block slot must be non-negative")
        for name in ("sync_participation", "attester_slashings", "proposer_slashings"):
            if getattr(self, name) < 0:
                raise MalformedBlockError(f"{name} must be non-negative")
        for agg in self.aggregates:
            if agg.attested_slot >= self.slot:
                raise MalformedBlockError(
                    f"aggregate for slot {agg.attested_slot} cannot be included in block at slot {self.slot}"
                )

    @property
    def label(self) -> str:
        return self.source_label.node_id if self.source_label else ""


@dataclass(frozen=True)
class ScoreBonuses:
    attester_slashing: Fraction = Fraction(1, 16)
    proposer_slashing: Fraction = Fraction(1, 2)


DEFAULT_BONUSES: Final = ScoreBonuses()


@dataclass(frozen=True)
class InclusionIndex:
    """Flags already included on-chain per (epoch, validator). Updates return a new index."""

    spec: ChainSpec = DEFAULT_SPEC
    entries: Mapping[tuple[int, int], Flag] = field(default_factory=dict, hash=False)

    def flags(self, epoch: int, validator_id: int) -> Flag:
        return self.entries.get((epoch, validator_id), Flag.NONE)

    def __len__(self) -> int:
        return len(self.entries)

    def epochs(self) -> list[int]:
        return sorted({epoch for epoch, _ in self.entries})


@dataclass(frozen=True)
class BlockScore:
    slot: int
    new_votes: int = 0
    new_source: int = 0
    new_target: int = 0
    new_head: int = 0
    sync_bits: int = 0
    attester_slashings: int = 0
    proposer_slashings: int = 0
    score: Fraction = Fraction(0)

    @property
    def value(self) -> float:
        return float(self.score)


def _check_limits(block: BlockSummary, spec: ChainSpec) -> None:
    if len(block.aggregates) > spec.max_aggregations_per_block:
        raise BlockValidationError(
            f"block at slot {block.slot} carries {len(block.aggregates)} aggregates "
            f"(limit {spec.max_aggregations_per_block})"
        )
    if block.sync_participation > spec.sync_committee_size:
        raise BlockValidationError(
            f"block at slot {block.slot} claims {block.sync_participation} sync bits "
            f"(committee size {spec.sync_committee_size})"
        )


def _members(agg: AggregateSummary, committees: CommitteeLookup) -> tuple[int, ...]:
    try:
        members = committees.committee(agg.attested_slot, agg.committee_index)
    except KeyError as exc:
        raise MalformedBlockError(
            f"aggregate references unknown committee {agg.committee_index} at slot {agg.attested_slot}"
        ) from exc
    if len(members) != len(agg.bits):
        raise MalformedBlockError(
            f"aggregate for committee {agg.committee_index} at slot {agg.attested_slot} has "
            f"{len(agg.bits)} bits for {len(members)} members"
        )
    return members


def _earned(agg: AggregateSummary, block_slot: int) -> Flag:
    delay = block_slot - agg.attested_slot
    return timely_flags(agg.source_ok, agg.target_ok, agg.head_ok, delay).mask


def new_flags(
    block: BlockSummary,
    index: InclusionIndex,
    committees: CommitteeLookup,
) -> dict[tuple[int, int], Flag]:
    """Flags the block would newly include, keyed by (epoch, validator)."""
    gained: dict[tuple[int, int], Flag] = {}
    for agg in block.aggregates:
        members = _members(agg, committees)
        earned = _earned(agg, block.slot)
        if not earned:
            continue
        epoch = epoch_of(agg.attested_slot, index.spec)
        for member, bit in zip(members, agg.bits):
            if not bit:
                continue
            key = (epoch, member)
            have = index.entries.get(key, Flag.NONE) | gained.get(key, Flag.NONE)
            fresh = earned & ~have
            if fresh:
                gained[key] = gained.get(key, Flag.NONE) | fresh
    return gained


def marginal_value(
    agg: AggregateSummary,
    block_slot: int,
    index: InclusionIndex,
    committees: CommitteeLookup,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> Fraction:
    """Score an aggregate would add on its own on top of ``index``."""
    earned = _earned(agg, block_slot)
    if not earned:
        return Fraction(0)
    members = _members(agg, committees)
    epoch = epoch_of(agg.attested_slot, index.spec)
    total = 0
    for member, bit in zip(members, agg.bits):
        if bit:
            total += weights.flag_weight(earned & ~index.entries.get((epoch, member), Flag.NONE))
    return Fraction(total, weights.denominator)


def pack_aggregates(
    aggregates: Sequence[AggregateSummary],
    block_slot: int,
    index: InclusionIndex,
    committees: CommitteeLookup,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    limit: int = DEFAULT_SPEC.max_aggregations_per_block,
) -> list[tuple[int, AggregateSummary]]:
    """
    Greedy block packing. Each pick is the aggregate with the highest marginal
    value given the index plus everything already picked; its bits are trimmed
    to votes not yet included, so no vote is carried twice on one chain.

    Returns ``(input position, trimmed aggregate)`` in pick order. Ties go to
    the earlier input position.
    """
    taken: set[tuple[int, int]] = set()

    def trimmed(agg: AggregateSummary) -> AggregateSummary:
        members = _members(agg, committees)
        epoch = epoch_of(agg.attested_slot, index.spec)
        bits = tuple(
            bit and (epoch, member) not in index.entries and (epoch, member) not in taken
            for member, bit in zip(members, agg.bits)
        )
        return replace(agg, bits=bits)

    heap: list[tuple[Fraction, int]] = []
    for position, agg in enumerate(aggregates):
        gain = marginal_value(trimmed(agg), block_slot, index, committees, weights)
        if gain > 0:
            heap.append((-gain, position))
    heapq.heapify(heap)

    packed: list[tuple[int, AggregateSummary]] = []
    while heap and len(packed) < limit:
        stale, position = heapq.heappop(heap)
        candidate = trimmed(aggregates[position])
        gain = marginal_value(candidate, block_slot, index, committees, weights)
        if gain <= 0:
            continue
        # Gains only shrink as picks accumulate, so a fresh value equal to the stored one is the maximum.
        if -gain != stale:
            heapq.heappush(heap, (-gain, position))
            continue
        epoch = epoch_of(candidate.attested_slot, index.spec)
        members = _members(candidate, committees)
        taken.update((epoch, member) for member, bit in zip(members, candidate.bits) if bit)
        packed.append((position, candidate))
    return packed


def score_block(
    block: BlockSummary,
    index: InclusionIndex,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    committees: Optional[CommitteeLookup] = None,
    *,
    spec: Optional[ChainSpec] = None,
    bonuses: ScoreBonuses = DEFAULT_BONUSES,
) -> BlockScore:
    spec = spec or index.spec
    _check_limits(block, spec)
    if block.aggregates and committees is None:
        raise MalformedBlockError(f"block at slot {block.slot} has aggregates but no committee lookup was given")
    gained = new_flags(block, index, committees) if block.aggregates else {}  # type: ignore[arg-type]

    new_source = sum(1 for f in gained.values() if f & Flag.SOURCE)
    new_target = sum(1 for f in gained.values() if f & Flag.TARGET)
    new_head = sum(1 for f in gained.values() if f & Flag.HEAD)
    score = Fraction(sum(weights.flag_weight(f) for f in gained.values()), weights.denominator)
    # Sync participation counts for the scored slot only.
    score += Fraction(block.sync_participation * weights.w_sync, weights.denominator * spec.sync_committee_size)
    score += bonuses.attester_slashing * block.attester_slashings
    score += bonuses.proposer_slashing * block.proposer_slashings
    return BlockScore(
        slot=block.slot,
        new_votes=len(gained),
        new_source=new_source,
        new_target=new_target,
        new_head=new_head,
        sync_bits=block.sync_participation,
        attester_slashings=block.attester_slashings,
        proposer_slashings=block.proposer_slashings,
        score=score,
    )


def _expired(epoch: int, slot: int, spec: ChainSpec) -> bool:
    last_includable = (epoch + 1) * spec.slots_per_epoch - 1 + TARGET_WINDOW
    return last_includable < slot


def update_index(index: InclusionIndex, canonical_block: BlockSummary, committees: Optional[CommitteeLookup] = None) -> InclusionIndex:
    if canonical_block.aggregates and committees is None:
        raise MalformedBlockError("updating the index with aggregates requires a committee lookup")
    gained = new_flags(canonical_block, index, committees) if canonical_block.aggregates else {}  # type: ignore[arg-type]
    spec = index.spec
    entries = {
        key: flags for key, flags in index.entries.items() if not _expired(key[0], canonical_block.slot, spec)
    }
    for key, flags in gained.items():
        entries[key] = entries.get(key, Flag.NONE) | flags
    return InclusionIndex(spec=spec, entries=entries)


@dataclass(frozen=True)
class RankedCandidate:
    rank: int
    label: str
    block: BlockSummary
    score: BlockScore
    normalized: float


@dataclass(frozen=True)
class CandidateRanking:
    slot: Optional[int]
    ranked: tuple[RankedCandidate, ...] = ()

    @property
    def no_candidates(self) -> bool:
        return not self.ranked

    @property
    def best(self) -> Optional[RankedCandidate]:
        return self.ranked[0] if self.ranked else None


def compare_candidates(
    candidates: Iterable[BlockSummary],
    index: InclusionIndex,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    committees: Optional[CommitteeLookup] = None,
    *,
    bonuses: ScoreBonuses = DEFAULT_BONUSES,
) -> CandidateRanking:
    blocks = list(candidates)
    if not blocks:
        return CandidateRanking(slot=None)
    slots = {block.slot for block in blocks}
    if len(slots) != 1:
        raise ValueError(f"candidates span several slots: {sorted(slots)}")
    scored = [(block, score_block(block, index, weights, committees, bonuses=bonuses)) for block in blocks]
    scored.sort(key=lambda item: (-item[1].score, -item[1].new_votes, item[0].label))
    best = scored[0][1].score
    ranked = tuple(
        RankedCandidate(
            rank=position + 1,
            label=block.label,
            block=block,
            score=score,
            normalized=float(score.score / best) if best > 0 else 0.0,
        )
        for position, (block, score) in enumerate(scored)
    )
    return CandidateRanking(slot=slots.pop(), ranked=ranked)
