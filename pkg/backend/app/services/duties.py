"""
Attestation flag evaluation, reward model and grouped duty statistics.

Rewards are computed as exact fractions; records carry floats, which stay
exact for the default base of 64 units.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import IntFlag
from fractions import Fraction
from typing import Final, Iterable, Literal, Optional

from ..errors import ConfigError, MalformedRecordError
from .chain import DEFAULT_SPEC, ChainSpec, ChainView, Checkpoint, DutyAssignment, epoch_of

SOURCE_WINDOW: Final = 5
TARGET_WINDOW: Final = 32
HEAD_WINDOW: Final = 1

GroupBy = Literal["location", "client", "node"]
GROUP_KEYS: Final[tuple[str, ...]] = ("location", "client", "node")


class Flag(IntFlag):
    NONE = 0
    SOURCE = 1
    TARGET = 2
    HEAD = 4


@dataclass(frozen=True)
class AttestationRecord:
    validator_id: int
    attested_slot: int
    claimed_source: Checkpoint
    claimed_target: Checkpoint
    claimed_head: bytes
    inclusion_slot: Optional[int] = None

    def __post_init__(self) -> None:
        if self.attested_slot < 0:
            raise MalformedRecordError(f"validator {self.validator_id}: negative attested slot")
        if self.inclusion_slot is not None and self.inclusion_slot <= self.attested_slot:
            raise MalformedRecordError(
                f"validator {self.validator_id}: inclusion slot {self.inclusion_slot} "
                f"is not after attested slot {self.attested_slot}"
            )


@dataclass(frozen=True)
class FlagVector:
    source_ok: bool
    target_ok: bool
    head_ok: bool
    inclusion_delay: Optional[int]

    def __post_init__(self) -> None:
        if self.head_ok and not self.target_ok or self.target_ok and not self.source_ok:
            raise ValueError("flags must satisfy head => target => source")
        if self.head_ok and self.inclusion_delay != HEAD_WINDOW:
            raise ValueError("a correct head flag requires an inclusion delay of 1")
        if self.inclusion_delay is not None and self.inclusion_delay < 1:
            raise ValueError("inclusion delay must be positive")
        if self.inclusion_delay is None and self.source_ok:
            raise ValueError("a missed attestation cannot carry flags")

    @property
    def mask(self) -> Flag:
        out = Flag.NONE
        if self.source_ok:
            out |= Flag.SOURCE
        if self.target_ok:
            out |= Flag.TARGET
        if self.head_ok:
            out |= Flag.HEAD
        return out

    @property
    def missed(self) -> bool:
        return self.inclusion_delay is None


MISSED: Final = FlagVector(False, False, False, None)


def timely_flags(source_match: bool, target_match: bool, head_match: bool, delay: int) -> FlagVector:
    """Apply the inclusion windows and the head => target => source chain to raw claim matches."""
    if delay < 1:
        raise MalformedRecordError(f"inclusion delay must be positive, got {delay}")
    source_ok = source_match and delay <= SOURCE_WINDOW
    target_ok = source_ok and target_match and delay <= TARGET_WINDOW
    head_ok = target_ok and head_match and delay <= HEAD_WINDOW
    return FlagVector(source_ok, target_ok, head_ok, delay)


def evaluate_attestation(att: AttestationRecord, view: ChainView) -> FlagVector:
    if att.inclusion_slot is None:
        return MISSED
    # Both slots must be covered by the view.
    view.root_at(att.inclusion_slot)
    source_match = att.claimed_source == view.justified(att.attested_slot)
    target_match = att.claimed_target == view.target(epoch_of(att.attested_slot, view.spec))
    head_match = att.claimed_head == view.block_root_at(att.attested_slot)
    return timely_flags(source_match, target_match, head_match, att.inclusion_slot - att.attested_slot)


# --- rewards ----------------------------------------------------------------


@dataclass(frozen=True)
class RewardWeights:
    w_source: int = 14
    w_target: int = 26
    w_head: int = 14
    w_sync: int = 2
    w_proposer: int = 8
    denominator: int = 64

    def __post_init__(self) -> None:
        for name in ("w_source", "w_target", "w_head", "w_sync", "w_proposer"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.denominator <= 0:
            raise ConfigError("weight denominator must be positive")
        # An all-zero attestation config is allowed; anything else must rank target first.
        if any((self.w_source, self.w_target, self.w_head)) and not (
            self.w_target > self.w_head and self.w_target > self.w_source
        ):
            raise ConfigError("target weight must exceed both source and head weights")

    def flag_weight(self, flag: Flag) -> int:
        total = 0
        if flag & Flag.SOURCE:
            total += self.w_source
        if flag & Flag.TARGET:
            total += self.w_target
        if flag & Flag.HEAD:
            total += self.w_head
        return total


DEFAULT_WEIGHTS: Final = RewardWeights()


def _check_base(base: int | Fraction) -> None:
    if base <= 0:
        raise ValueError(f"base reward must be positive, got {base}")


def attestation_reward(flags: FlagVector, weights: RewardWeights = DEFAULT_WEIGHTS, base: int = 64) -> Fraction:
    _check_base(base)
    return Fraction(base * weights.flag_weight(flags.mask), weights.denominator)


def sync_reward_per_slot(weights: RewardWeights = DEFAULT_WEIGHTS, base: int = 64) -> Fraction:
    _check_base(base)
    return Fraction(base * weights.w_sync, weights.denominator)


def max_epoch_reward(
    assignment: DutyAssignment,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    base: int = 64,
    spec: ChainSpec = DEFAULT_SPEC,
) -> Fraction:
    """Perfect attestation plus a full epoch of sync signatures for members. Proposer income is excluded."""
    _check_base(base)
    perfect = Fraction(base * weights.flag_weight(Flag.SOURCE | Flag.TARGET | Flag.HEAD), weights.denominator)
    if assignment.is_sync_member:
        perfect += sync_reward_per_slot(weights, base) * spec.slots_per_epoch
    return perfect


@dataclass(frozen=True)
class EpochPerformance:
    validator_id: int
    epoch: int
    achieved_reward: float
    mer: float
    flags: FlagVector
    proposals_assigned: int = 0
    proposals_fulfilled: int = 0
    sync_slots_assigned: int = 0
    sync_slots_signed: int = 0
    location: str = ""
    client: str = ""
    node_id: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.achieved_reward <= self.mer:
            raise MalformedRecordError(
                f"validator {self.validator_id} epoch {self.epoch}: achieved {self.achieved_reward} outside [0, {self.mer}]"
            )
        if not 0 <= self.proposals_fulfilled <= self.proposals_assigned:
            raise MalformedRecordError(f"validator {self.validator_id}: fulfilled proposals exceed assigned")
        if not 0 <= self.sync_slots_signed <= self.sync_slots_assigned:
            raise MalformedRecordError(f"validator {self.validator_id}: signed sync slots exceed assigned")

    @property
    def ratio(self) -> float:
        return self.achieved_reward / self.mer if self.mer else 0.0

    def group_label(self, group_by: str) -> str:
        if group_by == "location":
            return self.location
        if group_by == "client":
            return self.client
        if group_by == "node":
            return self.node_id
        raise ConfigError(f"unknown grouping {group_by!r}; expected one of {', '.join(GROUP_KEYS)}")


def epoch_performance(
    assignment: DutyAssignment,
    flags: FlagVector,
    *,
    sync_slots_signed: int = 0,
    proposals_assigned: Optional[int] = None,
    proposals_fulfilled: int = 0,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    base: int = 64,
    spec: ChainSpec = DEFAULT_SPEC,
    location: str = "",
    client: str = "",
    node_id: str = "",
) -> EpochPerformance:
    sync_assigned = spec.slots_per_epoch if assignment.is_sync_member else 0
    achieved = attestation_reward(flags, weights, base) + sync_reward_per_slot(weights, base) * sync_slots_signed
    return EpochPerformance(
        validator_id=assignment.validator_id,
        epoch=assignment.epoch,
        achieved_reward=float(achieved),
        mer=float(max_epoch_reward(assignment, weights, base, spec)),
        flags=flags,
        proposals_assigned=len(assignment.proposer_slots) if proposals_assigned is None else proposals_assigned,
        proposals_fulfilled=proposals_fulfilled,
        sync_slots_assigned=sync_assigned,
        sync_slots_signed=sync_slots_signed,
        location=location,
        client=client,
        node_id=node_id,
    )


# --- grouped statistics -------------------------------------------------------


@dataclass(frozen=True)
class StatRow:
    group: str
    records: int
    achieved: float
    mer: float
    achieved_pct: float
    missed_source_ratio: float
    missed_target_ratio: float
    missed_head_ratio: float
    proposals_assigned: int
    proposals_missed: int
    missed_proposal_ratio: float

    @property
    def attestations(self) -> int:
        return self.records


@dataclass(frozen=True)
class StatReport:
    group_by: str
    rows: tuple[StatRow, ...] = ()
    empty_reason: Optional[str] = None

    @property
    def is_empty(self) -> bool:
        return not self.rows

    def row(self, group: str) -> StatRow:
        for row in self.rows:
            if row.group == group:
                return row
        raise KeyError(group)


@dataclass
class _GroupTotals:
    records: int = 0
    achieved: float = 0.0
    mer: float = 0.0
    missed_source: int = 0
    missed_target: int = 0
    missed_head: int = 0
    proposals_assigned: int = 0
    proposals_fulfilled: int = 0


class StatsAccumulator:
    """Single-writer accumulator fed one EpochPerformance at a time."""

    def __init__(self, group_by: GroupBy = "location") -> None:
        if group_by not in GROUP_KEYS:
            raise ConfigError(f"unknown grouping {group_by!r}; expected one of {', '.join(GROUP_KEYS)}")
        self.group_by = group_by
        self._groups: dict[str, _GroupTotals] = defaultdict(_GroupTotals)

    def add(self, record: EpochPerformance) -> None:
        totals = self._groups[record.group_label(self.group_by)]
        totals.records += 1
        totals.achieved += record.achieved_reward
        totals.mer += record.mer
        totals.missed_source += not record.flags.source_ok
        totals.missed_target += not record.flags.target_ok
        totals.missed_head += not record.flags.head_ok
        totals.proposals_assigned += record.proposals_assigned
        totals.proposals_fulfilled += record.proposals_fulfilled

    def report(self) -> StatReport:
        if not self._groups:
            return StatReport(self.group_by, (), "no epoch performance records")
        rows = []
        for group in sorted(self._groups):
            t = self._groups[group]
            missed_proposals = t.proposals_assigned - t.proposals_fulfilled
            rows.append(
                StatRow(
                    group=group,
                    records=t.records,
                    achieved=t.achieved,
                    mer=t.mer,
                    achieved_pct=100.0 * t.achieved / t.mer if t.mer else 0.0,
                    missed_source_ratio=t.missed_source / t.records,
                    missed_target_ratio=t.missed_target / t.records,
                    missed_head_ratio=t.missed_head / t.records,
                    proposals_assigned=t.proposals_assigned,
                    proposals_missed=missed_proposals,
                    missed_proposal_ratio=missed_proposals / t.proposals_assigned if t.proposals_assigned else 0.0,
                )
            )
        return StatReport(self.group_by, tuple(rows))


def aggregate_stats(records: Iterable[EpochPerformance], group_by: GroupBy = "location") -> StatReport:
    acc = StatsAccumulator(group_by)
    for record in records:
        acc.add(record)
    return acc.report()
