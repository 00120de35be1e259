"""
Record derivation shared by the simulate and collect paths, plus the
row <-> domain conversions reports rely on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

from pydantic import BaseModel

from ..errors import ClockSkewError, ConfigError
from ..record_log import RecordLog
from ..schemas import (
    RECORD_TYPES,
    ArrivalRow,
    BlockScoreRow,
    EpochPerformanceRow,
    GroundTruthRow,
    ReorgRow,
    SyncSpanRow,
)
from .block_scorer import DEFAULT_BONUSES, BlockScore, ScoreBonuses, compare_candidates
from .chain import SlotClock, root_hex
from .duties import DEFAULT_WEIGHTS, EpochPerformance, FlagVector, RewardWeights
from .simulator import CandidateUnavailable, SimulationResult
from .telemetry import ArrivalRecord, ReorgEvent, StreamEvent, SyncSpan, build_sync_spans, record_arrival

logger = logging.getLogger(__name__)


@dataclass
class IngestionSummary:
    source: str
    counts: dict[str, int] = field(default_factory=lambda: {kind: 0 for kind in RECORD_TYPES})
    appended: int = 0
    skipped: int = 0
    rejected_arrivals: int = 0
    endpoints_failed: dict[str, str] = field(default_factory=dict)

    def add_rows(self, rows: Iterable[BaseModel]) -> None:
        for row in rows:
            self.counts[row.type] = self.counts.get(row.type, 0) + 1  # type: ignore[attr-defined]

    def as_dict(self) -> dict:
        return {
            "source": self.source,
            "counts": dict(self.counts),
            "appended": self.appended,
            "skipped": self.skipped,
            "rejected_arrivals": self.rejected_arrivals,
            "endpoints_failed": dict(self.endpoints_failed),
        }


# --- row builders -------------------------------------------------------------


def arrival_row(record: ArrivalRecord) -> ArrivalRow:
    return ArrivalRow(
        node_id=record.node_id,
        location=record.location,
        client=record.client,
        slot=record.slot,
        offset_ms=record.arrival_offset_ms,
        kind=record.event_kind,
        root=record.root,
        skew=record.skew_flagged,
    )


def performance_row(perf: EpochPerformance) -> EpochPerformanceRow:
    return EpochPerformanceRow(
        validator_id=perf.validator_id,
        epoch=perf.epoch,
        node_id=perf.node_id,
        location=perf.location,
        client=perf.client,
        achieved=perf.achieved_reward,
        mer=perf.mer,
        source_ok=perf.flags.source_ok,
        target_ok=perf.flags.target_ok,
        head_ok=perf.flags.head_ok,
        inclusion_delay=perf.flags.inclusion_delay,
        proposals_assigned=perf.proposals_assigned,
        proposals_fulfilled=perf.proposals_fulfilled,
        sync_slots_assigned=perf.sync_slots_assigned,
        sync_slots_signed=perf.sync_slots_signed,
    )


def reorg_row(event: ReorgEvent) -> ReorgRow:
    return ReorgRow(
        node_id=event.node_id,
        location=event.location,
        client=event.client,
        slot=event.slot,
        depth=event.depth,
        old_head=event.old_head,
        new_head=event.new_head,
    )


def sync_span_row(span: SyncSpan, location: str = "", client: str = "") -> SyncSpanRow:
    return SyncSpanRow(
        node_id=span.node_id,
        location=location,
        client=client,
        first_slot=span.first_slot,
        last_slot=span.last_slot,
        state=span.state,
    )


def score_row(
    slot: int,
    node_id: str,
    location: str,
    client: str,
    score: Optional[BlockScore] = None,
    *,
    rank: Optional[int] = None,
    normalized: Optional[float] = None,
    status: str = "ok",
) -> BlockScoreRow:
    if score is None:
        return BlockScoreRow(slot=slot, node_id=node_id, location=location, client=client, status=status)  # type: ignore[arg-type]
    return BlockScoreRow(
        slot=slot,
        node_id=node_id,
        location=location,
        client=client,
        status="ok",
        rank=rank,
        score=score.value,
        normalized=normalized,
        new_votes=score.new_votes,
        new_source=score.new_source,
        new_target=score.new_target,
        new_head=score.new_head,
        sync_bits=score.sync_bits,
        attester_slashings=score.attester_slashings,
        proposer_slashings=score.proposer_slashings,
    )


# --- row -> domain ------------------------------------------------------------------


def performance_from_row(row: EpochPerformanceRow) -> EpochPerformance:
    return EpochPerformance(
        validator_id=row.validator_id,
        epoch=row.epoch,
        achieved_reward=row.achieved,
        mer=row.mer,
        flags=FlagVector(row.source_ok, row.target_ok, row.head_ok, row.inclusion_delay),
        proposals_assigned=row.proposals_assigned,
        proposals_fulfilled=row.proposals_fulfilled,
        sync_slots_assigned=row.sync_slots_assigned,
        sync_slots_signed=row.sync_slots_signed,
        location=row.location,
        client=row.client,
        node_id=row.node_id,
    )


def arrival_from_row(row: ArrivalRow) -> ArrivalRecord:
    return ArrivalRecord(
        node_id=row.node_id,
        location=row.location,
        client=row.client,
        slot=row.slot,
        arrival_offset_ms=row.offset_ms,
        event_kind=row.kind,
        root=row.root,
        skew_flagged=row.skew,
    )


def reorg_from_row(row: ReorgRow) -> ReorgEvent:
    return ReorgEvent(
        node_id=row.node_id,
        slot=row.slot,
        depth=row.depth,
        location=row.location,
        client=row.client,
        old_head=row.old_head,
        new_head=row.new_head,
    )


def span_from_row(row: SyncSpanRow) -> SyncSpan:
    return SyncSpan(row.node_id, row.first_slot, row.last_slot, row.state)


# --- simulation output ------------------------------------------------------------------


def simulated_arrivals(
    result: SimulationResult, tolerance_ms: Optional[int] = None
) -> tuple[list[ArrivalRecord], int]:
    """Block-arrival records from every node's served stream; returns (records, rejected)."""
    clock = SlotClock(result.spec)
    records: list[ArrivalRecord] = []
    rejected = 0
    for profile in result.profiles():
        for event in result.events(profile.node_id):
            if event.kind != "block":
                continue
            stream_event = StreamEvent(
                kind="block",
                slot=event.slot,
                root=root_hex(event.root),
                receipt_ms=clock.genesis_ms + event.local_ms,
                node_id=profile.node_id,
            )
            try:
                records.append(
                    record_arrival(
                        stream_event, clock, location=profile.region, client=profile.client, tolerance_ms=tolerance_ms
                    )
                )
            except ClockSkewError as exc:
                rejected += 1
                logger.warning("Rejected arrival on %s: %s", profile.node_id, exc)
    return records, rejected


def simulated_block_scores(
    result: SimulationResult,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    bonuses: ScoreBonuses = DEFAULT_BONUSES,
) -> list[BlockScoreRow]:
    """Ask every node for a candidate at every duty slot and rank them against the canonical index."""
    spec = result.spec
    profiles = result.profiles()
    rows: list[BlockScoreRow] = []
    for slot in range(result.config.duration_slots):
        candidates = []
        unavailable: dict[str, str] = {}
        for profile in profiles:
            if result.response_delay_ms(profile.node_id, slot) > spec.attestation_deadline_ms:
                unavailable[profile.node_id] = "timeout"
                continue
            try:
                candidates.append(result.build_candidate(profile.node_id, slot))
            except CandidateUnavailable as exc:
                unavailable[profile.node_id] = exc.reason
        ranking = compare_candidates(
            candidates, result.index_before(slot), weights, result.committees, bonuses=bonuses
        )
        ranked = {entry.label: entry for entry in ranking.ranked}
        for profile in profiles:
            entry = ranked.get(profile.node_id)
            if entry is None:
                rows.append(
                    score_row(
                        slot,
                        profile.node_id,
                        profile.region,
                        profile.client,
                        status=unavailable.get(profile.node_id, "out_of_sync"),
                    )
                )
            else:
                rows.append(
                    score_row(
                        slot,
                        profile.node_id,
                        profile.region,
                        profile.client,
                        entry.score,
                        rank=entry.rank,
                        normalized=entry.normalized,
                    )
                )
    return rows


def simulated_sync_spans(result: SimulationResult) -> list[SyncSpanRow]:
    rows = []
    for profile in result.profiles():
        states = result.truth.sync_states[profile.node_id]
        for span in build_sync_spans(profile.node_id, states):
            rows.append(sync_span_row(span, profile.region, profile.client))
    return rows


def ground_truth_rows(result: SimulationResult) -> list[GroundTruthRow]:
    config = result.config
    rows = [
        GroundTruthRow(
            kind="run",
            scenario=config.name,
            seed=config.seed,
            duration_slots=config.duration_slots,
            validators=config.validator_count,
            slots_per_epoch=config.spec.slots_per_epoch,
        )
    ]
    for block in result.truth.canonical_blocks():
        rows.append(
            GroundTruthRow(
                kind="canonical_block",
                slot=block.slot,
                node_id=block.node_id,
                root=root_hex(block.root),
                parent_root=root_hex(block.parent_root),
                proposer_id=block.proposer_id,
            )
        )
    for slot in result.truth.missed_slots:
        rows.append(GroundTruthRow(kind="missed_slot", slot=slot))
    for profile in result.profiles():
        blocks = [e for e in result.events(profile.node_id, include_dropped=True) if e.kind == "block"]
        rows.append(
            GroundTruthRow(
                kind="stream_totals",
                node_id=profile.node_id,
                emitted=len(blocks),
                dropped=sum(1 for e in blocks if e.dropped),
            )
        )
    return rows


def simulation_rows(
    result: SimulationResult,
    *,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    with_block_scores: bool = True,
    tolerance_ms: Optional[int] = None,
) -> tuple[list[BaseModel], int]:
    """All record rows for one run, in a fixed order; returns (rows, rejected arrivals)."""
    arrivals, rejected = simulated_arrivals(result, tolerance_ms)
    rows: list[BaseModel] = []
    rows.extend(ground_truth_rows(result))
    rows.extend(arrival_row(a) for a in arrivals)
    if with_block_scores:
        rows.extend(simulated_block_scores(result, weights))
    rows.extend(performance_row(p) for p in result.truth.performances)
    rows.extend(reorg_row(r) for r in result.truth.reorgs)
    rows.extend(simulated_sync_spans(result))
    return rows, rejected


# --- ingestion ------------------------------------------------------------------------


def ingest_simulation(result: SimulationResult, destination: RecordLog, **kwargs) -> IngestionSummary:
    rows, rejected = simulation_rows(result, **kwargs)
    summary = IngestionSummary(source="simulate", rejected_arrivals=rejected)
    summary.add_rows(rows)
    summary.appended = destination.append(rows)
    logger.info("Ingested %s records from simulation %s into %s.", summary.appended, result.config.name, destination.path)
    return summary


def ingest_replay(source: RecordLog, destination: RecordLog) -> IngestionSummary:
    read = source.read(verify=True)
    summary = IngestionSummary(source="replay")
    summary.add_rows(r.row for r in read.records)
    if source.path.resolve() == destination.path.resolve():
        summary.skipped = len(read.records)
        return summary
    summary.appended, summary.skipped = destination.append_with_ids(read.records)
    return summary


def ingest(
    source: Literal["live", "simulate", "replay"],
    destination: RecordLog,
    *,
    result: Optional[SimulationResult] = None,
    replay_from: Optional[RecordLog] = None,
    collector=None,
    duration_slots: Optional[int] = None,
) -> IngestionSummary:
    if source == "simulate":
        if result is None:
            raise ConfigError("simulate ingestion needs a simulation result")
        return ingest_simulation(result, destination)
    if source == "replay":
        if replay_from is None:
            raise ConfigError("replay ingestion needs a source log")
        return ingest_replay(replay_from, destination)
    if source == "live":
        if collector is None:
            raise ConfigError("live ingestion needs a collector")
        return collector.run(destination, duration_slots=duration_slots)
    raise ConfigError(f"unknown ingestion source {source!r}")
