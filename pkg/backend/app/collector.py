"""
Live collection: one streaming thread per endpoint feeding a TelemetrySink,
plus a slot loop that requests candidate blocks and polls sync status.
"""
import logging
import threading
import time
from dataclasses import replace
from typing import Callable, Optional, Sequence

from .errors import ClockSkewError, DataError, EndpointDownError
from .record_log import RecordLog
from .schemas import BlockScoreRow
from .services.beacon_client import (
    EVENT_KINDS,
    BeaconClient,
    BlockProductionFanout,
    EndpointDown,
    GapMarker,
    NodeEndpoint,
    Unavailable,
)
from .services.block_scorer import (
    DEFAULT_BONUSES,
    BlockSummary,
    InclusionIndex,
    ScoreBonuses,
    StaticCommittees,
    compare_candidates,
    score_block,
    update_index,
)
from .services.chain import DEFAULT_SPEC, ChainSpec, SlotClock, epoch_of
from .services.duties import DEFAULT_WEIGHTS, RewardWeights
from .services.pipeline import IngestionSummary, arrival_row, reorg_row, score_row, sync_span_row
from .services.telemetry import ReorgEvent, StreamEvent, TelemetrySink, build_sync_spans, is_out_of_sync, record_arrival

logger = logging.getLogger(__name__)


def _wall_ms() -> int:
    return int(time.time() * 1000)


class Collector:
    def __init__(
        self,
        endpoints: Sequence[NodeEndpoint],
        *,
        client: Optional[BeaconClient] = None,
        spec: ChainSpec = DEFAULT_SPEC,
        weights: RewardWeights = DEFAULT_WEIGHTS,
        bonuses: ScoreBonuses = DEFAULT_BONUSES,
        kinds: Sequence[str] = ("block", "chain_reorg"),
        tolerance_ms: Optional[int] = None,
        enforce_deadline: bool = True,
        sleep: Callable[[float], None] = time.sleep,
        now_ms: Callable[[], int] = _wall_ms,
        join_timeout_s: float = 5.0,
    ) -> None:
        self.endpoints = list(endpoints)
        self.client = client or BeaconClient(sleep=sleep, now_ms=now_ms)
        self.spec = spec
        self.weights = weights
        self.bonuses = bonuses
        self.kinds = [k for k in kinds if k in EVENT_KINDS]
        self.tolerance_ms = tolerance_ms
        self.enforce_deadline = enforce_deadline
        self._sleep = sleep
        self._now_ms = now_ms
        self._join_timeout_s = join_timeout_s
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.gaps: dict[str, int] = {e.node_id: 0 for e in self.endpoints}

    # --- setup -------------------------------------------------------------------

    def _genesis_clock(self, summary: IngestionSummary) -> Optional[SlotClock]:
        for endpoint in self.endpoints:
            try:
                genesis = self.client.get_genesis(endpoint)
            except EndpointDownError as exc:
                self._fail(summary, endpoint.node_id, exc.reason)
                continue
            return SlotClock(replace(self.spec, genesis_time=genesis.genesis_time))
        return None

    def _fail(self, summary: IngestionSummary, node_id: str, reason: str) -> None:
        with self._lock:
            if node_id not in summary.endpoints_failed:
                logger.warning("Endpoint %s failed during collection: %s", node_id, reason)
                summary.endpoints_failed[node_id] = reason

    # --- streaming ---------------------------------------------------------------

    def _stream_worker(self, endpoint: NodeEndpoint, clock: SlotClock, sink: TelemetrySink, summary: IngestionSummary) -> None:
        try:
            for item in self.client.subscribe_events(endpoint, self.kinds, stop=self._stop):
                if isinstance(item, GapMarker):
                    with self._lock:
                        self.gaps[endpoint.node_id] += 1
                    logger.info("Stream gap on %s after %s attempts.", endpoint.node_id, item.attempts)
                elif isinstance(item, EndpointDown):
                    self._fail(summary, endpoint.node_id, item.reason)
                else:
                    self._record_event(item, endpoint, clock, sink, summary)
        except Exception as exc:
            logger.exception("Stream worker for %s stopped unexpectedly.", endpoint.node_id)
            self._fail(summary, endpoint.node_id, str(exc))

    def _record_event(
        self, event: StreamEvent, endpoint: NodeEndpoint, clock: SlotClock, sink: TelemetrySink, summary: IngestionSummary
    ) -> None:
        if event.kind == "chain_reorg":
            reorg = ReorgEvent(
                node_id=endpoint.node_id,
                slot=event.slot,
                depth=event.depth or 0,
                location=endpoint.location,
                client=endpoint.client,
                old_head=event.old_head,
                new_head=event.new_head,
            )
            sink.submit(reorg_row(reorg), key=("reorg", endpoint.node_id, event.slot, event.new_head))
            return
        try:
            record = record_arrival(
                event, clock, location=endpoint.location, client=endpoint.client, tolerance_ms=self.tolerance_ms
            )
        except ClockSkewError as exc:
            with self._lock:
                summary.rejected_arrivals += 1
            logger.warning("Rejected arrival on %s: %s", endpoint.node_id, exc)
            return
        sink.submit(arrival_row(record), key=("arrival", endpoint.node_id, event.kind, event.slot, event.root))

    # --- slot loop ----------------------------------------------------------------

    def _wait_until(self, wall_ms: int) -> None:
        remaining = wall_ms - self._now_ms()
        if remaining > 0:
            self._sleep(remaining / 1000)

    def _sync_states(self, slot: int, states: dict[str, list[bool]], summary: IngestionSummary) -> None:
        answers: dict[str, tuple[bool, int]] = {}
        for endpoint in self.endpoints:
            try:
                status = self.client.get_sync_status(endpoint)
            except EndpointDownError as exc:
                self._fail(summary, endpoint.node_id, exc.reason)
                continue
            answers[endpoint.node_id] = (status.is_syncing, status.head_slot)
        reference = max((head for _, head in answers.values()), default=slot - 1)
        for endpoint in self.endpoints:
            answer = answers.get(endpoint.node_id)
            out = True if answer is None else is_out_of_sync(answer[1], reference, answer[0])
            states[endpoint.node_id].append(out)

    def _ensure_committees(self, committees: StaticCommittees, fetched: set[int], epoch: int, summary: IngestionSummary) -> None:
        if epoch < 0 or epoch in fetched:
            return
        for endpoint in self.endpoints:
            try:
                committees.update(self.client.get_committees(endpoint, epoch))
            except EndpointDownError as exc:
                self._fail(summary, endpoint.node_id, exc.reason)
                continue
            fetched.add(epoch)
            return

    def _canonical_block(self, slot: int, summary: IngestionSummary) -> Optional[BlockSummary]:
        for endpoint in self.endpoints:
            try:
                return self.client.get_block_summary(endpoint, slot)
            except EndpointDownError as exc:
                self._fail(summary, endpoint.node_id, exc.reason)
        return None

    def _score_slot(
        self,
        slot: int,
        results: dict,
        index: InclusionIndex,
        committees: StaticCommittees,
    ) -> list[BlockScoreRow]:
        labels = {e.node_id: e for e in self.endpoints}
        statuses: dict[str, str] = {}
        candidates: list[BlockSummary] = []
        for node_id, result in results.items():
            if isinstance(result, Unavailable):
                statuses[node_id] = result.reason
                continue
            try:
                score_block(result, index, self.weights, committees, bonuses=self.bonuses)
            except DataError as exc:
                logger.warning("Candidate from %s at slot %s rejected: %s", node_id, slot, exc)
                statuses[node_id] = "protocol_error"
                continue
            candidates.append(result)
        ranking = compare_candidates(candidates, index, self.weights, committees, bonuses=self.bonuses)
        ranked = {entry.label: entry for entry in ranking.ranked}
        rows = []
        for node_id, endpoint in labels.items():
            entry = ranked.get(node_id)
            if entry is None:
                rows.append(
                    score_row(slot, node_id, endpoint.location, endpoint.client, status=statuses.get(node_id, "protocol_error"))
                )
            else:
                rows.append(
                    score_row(
                        slot,
                        node_id,
                        endpoint.location,
                        endpoint.client,
                        entry.score,
                        rank=entry.rank,
                        normalized=entry.normalized,
                    )
                )
        return rows

    # --- entrypoint -----------------------------------------------------------------

    def run(
        self,
        destination: RecordLog,
        duration_slots: Optional[int] = None,
        first_slot: Optional[int] = None,
    ) -> IngestionSummary:
        summary = IngestionSummary(source="live")
        clock = self._genesis_clock(summary)
        if clock is None:
            logger.warning("No endpoint answered the genesis request; nothing collected.")
            return summary
        spec = clock.spec
        duration = duration_slots or spec.slots_per_epoch
        start = clock.slot_at(self._now_ms()) + 1 if first_slot is None else first_slot
        start = max(0, start)

        def write(row) -> None:
            destination.append([row])
            with self._lock:
                summary.add_rows([row])

        sink = TelemetrySink(write)
        sink.start()
        threads = []
        for endpoint in self.endpoints:
            t = threading.Thread(
                target=self._stream_worker,
                args=(endpoint, clock, sink, summary),
                daemon=True,
                name=f"stream-{endpoint.node_id}",
            )
            t.start()
            threads.append(t)

        fanout = BlockProductionFanout(self.client, self.endpoints, slot_clock=clock if self.enforce_deadline else None)
        committees = StaticCommittees({})
        fetched: set[int] = set()
        index = InclusionIndex(spec=spec)
        states: dict[str, list[bool]] = {e.node_id: [] for e in self.endpoints}
        try:
            for slot in range(start, start + duration):
                self._wait_until(clock.slot_start_ms(slot))
                epoch = epoch_of(slot, spec)
                self._ensure_committees(committees, fetched, epoch - 1, summary)
                self._ensure_committees(committees, fetched, epoch, summary)
                if slot > 0:
                    parent = self._canonical_block(slot - 1, summary)
                    if parent is not None:
                        try:
                            index = update_index(index, parent, committees)
                        except DataError as exc:
                            logger.warning("Could not index canonical block at slot %s: %s", slot - 1, exc)
                results = fanout.request(slot)
                for row in self._score_slot(slot, results, index, committees):
                    sink.submit(row, key=("block_score", row.node_id, slot))
                self._sync_states(slot, states, summary)
        finally:
            self._stop.set()
            fanout.close()
            for t in threads:
                t.join(self._join_timeout_s)
            for endpoint in self.endpoints:
                for span in build_sync_spans(endpoint.node_id, states[endpoint.node_id], first_slot=start):
                    sink.submit(sync_span_row(span, endpoint.location, endpoint.client))
            sink.close(self._join_timeout_s)

        summary.appended = sink.accepted
        summary.skipped = sink.duplicates
        logger.info(
            "Collected %s records from %s endpoints (%s failed).",
            summary.appended,
            len(self.endpoints),
            len(summary.endpoints_failed),
        )
        return summary
