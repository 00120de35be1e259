"""
One simulated beacon node as seen through its HTTP API.

With ``speed > 0`` the node replays its run against the wall clock
(``speed`` simulated ms per wall ms, genesis at construction time). With
``speed == 0`` everything is served at once: the node sits at the end of
the run, each stream connection serves one segment between stream-drop
windows and a 204 follows the last one.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from typing import Callable, Iterator, Optional, Sequence

from ..schemas import (
    BlockSummaryPayload,
    BlockSummaryResponse,
    CommitteeData,
    CommitteesResponse,
    GenesisData,
    GenesisResponse,
    SyncingData,
    SyncingResponse,
)
from .chain import epoch_of, root_hex
from .simulator import CandidateUnavailable, NodeEvent, SimulationResult

logger = logging.getLogger(__name__)

KEEPALIVE_S = 15.0
_WIRE_KIND = {"block": "block", "head": "head", "chain_reorg": "chain_reorg"}


class NodeSyncing(Exception):
    pass


class SlotOutOfRange(ValueError):
    pass


def _wall_ms() -> int:
    return int(time.time() * 1000)


def sse_frame(kind: str, payload: dict) -> str:
    return f"event: {kind}\ndata: {json.dumps(payload, separators=(',', ':'))}\n\n"


def event_payload(event: NodeEvent, slots_per_epoch: int) -> dict:
    root = root_hex(event.root)
    if event.kind == "block":
        return {"slot": str(event.slot), "block": root, "execution_optimistic": False}
    if event.kind == "head":
        return {
            "slot": str(event.slot),
            "block": root,
            "state": root,
            "epoch_transition": event.slot % slots_per_epoch == 0,
        }
    return {
        "slot": str(event.slot),
        "depth": str(event.depth),
        "old_head_block": root_hex(event.old_head),
        "new_head_block": root_hex(event.new_head),
        "epoch": str(event.slot // slots_per_epoch),
    }


class SimNode:
    def __init__(
        self,
        result: SimulationResult,
        node_id: str,
        *,
        speed: float = 1.0,
        genesis_ms: Optional[int] = None,
        now_ms: Callable[[], int] = _wall_ms,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if speed < 0:
            raise ValueError("speed must be non-negative")
        self.result = result
        self.profile = result.profile(node_id)
        self.node_id = node_id
        self.speed = speed
        self._now_ms = now_ms
        self._sleep = sleep
        spec = result.spec
        if self.instant:
            self.genesis_ms = spec.genesis_time * 1000
        else:
            start = now_ms() if genesis_ms is None else genesis_ms
            self.genesis_ms = int(math.ceil(start / 1000)) * 1000
        self._end_ms = (result.config.duration_slots + 1) * spec.slot_ms
        self._segments = result.stream_segments(node_id)
        self._cursor = 0
        self._lock = threading.Lock()

    @property
    def instant(self) -> bool:
        return self.speed == 0

    def sim_ms(self) -> int:
        if self.instant:
            return self._end_ms
        return int((self._now_ms() - self.genesis_ms) * self.speed)

    def _wall_at(self, sim_ms: int) -> int:
        return self.genesis_ms + int(sim_ms / self.speed)

    def _check_slot(self, slot: int) -> None:
        if slot < 0 or slot > self.result.config.duration_slots:
            raise SlotOutOfRange(f"slot {slot} is outside the simulated range 0..{self.result.config.duration_slots}")

    # --- request handlers --------------------------------------------------------

    def genesis(self) -> GenesisResponse:
        return GenesisResponse(
            data=GenesisData(
                genesis_time=self.genesis_ms // 1000,
                genesis_validators_root=root_hex(self.result.anchor_root),
            )
        )

    def syncing(self) -> SyncingResponse:
        at = self.sim_ms()
        syncing, head_slot = self.result.sync_status(self.node_id, at)
        reference = self.result.reference_slot_at(at)
        return SyncingResponse(
            data=SyncingData(
                head_slot=max(0, head_slot),
                sync_distance=max(0, reference - head_slot),
                is_syncing=syncing,
            )
        )

    def produce_block(self, slot: int) -> BlockSummaryResponse:
        self._check_slot(slot)
        delay = self.result.response_delay_ms(self.node_id, slot)
        if delay and not self.instant:
            self._sleep(delay / self.speed / 1000)
        try:
            summary = self.result.build_candidate(self.node_id, slot)
        except CandidateUnavailable as exc:
            raise NodeSyncing(str(exc)) from exc
        return BlockSummaryResponse(data=BlockSummaryPayload.from_summary(summary))

    def block(self, slot: int) -> Optional[BlockSummaryResponse]:
        """Canonical block at ``slot`` once published; None for empty or future slots."""
        self._check_slot(slot)
        block = self.result.canonical_block(slot)
        if block is None or block.published_ms > self.sim_ms():
            return None
        return BlockSummaryResponse(data=BlockSummaryPayload.from_summary(block.summary))

    def committees(self, epoch: Optional[int] = None) -> CommitteesResponse:
        spec = self.result.spec
        if epoch is None:
            epoch = epoch_of(max(0, self.result.reference_slot_at(self.sim_ms())), spec)
        if epoch < 0:
            raise SlotOutOfRange("epoch must be non-negative")
        duties = self.result.committees.duties(epoch)
        data = [
            CommitteeData(index=index, slot=slot, validators=list(members))
            for (slot, index), members in sorted(duties.committees.items())
        ]
        return CommitteesResponse(data=data)

    # --- event stream ----------------------------------------------------------------

    def next_segment(self) -> Optional[list[NodeEvent]]:
        """Events for the next stream connection; None once every segment was served."""
        with self._lock:
            if self._cursor >= len(self._segments):
                return None
            segment = self._segments[self._cursor]
            self._cursor += 1
        if not self.instant:
            now = self.sim_ms()
            fresh = [e for e in segment if e.local_ms >= now]
            if len(fresh) < len(segment):
                logger.info("%s: skipping %s events that happened before the connection.", self.node_id, len(segment) - len(fresh))
            segment = fresh
        return segment

    def stream(self, segment: Sequence[NodeEvent], kinds: Sequence[str]) -> Iterator[str]:
        spe = self.result.spec.slots_per_epoch
        wanted = set(kinds)
        for event in segment:
            if event.kind not in wanted:
                continue
            if not self.instant:
                due = self._wall_at(event.local_ms)
                while True:
                    remaining = due - self._now_ms()
                    if remaining <= 0:
                        break
                    if remaining > KEEPALIVE_S * 1000:
                        self._sleep(KEEPALIVE_S)
                        yield ": keepalive\n\n"
                    else:
                        self._sleep(remaining / 1000)
            yield sse_frame(_WIRE_KIND[event.kind], event_payload(event, spe))
