"""
Block-arrival telemetry: slot-relative timestamps, latency CDFs, out-of-sync
spans and reorg counts.
"""
from __future__ import annotations

import logging
import queue
import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Final, Hashable, Iterable, Literal, Optional, Sequence

import numpy as np

from ..config import settings
from ..errors import ClockSkewError
from .chain import SlotClock

logger = logging.getLogger(__name__)

StreamKind = Literal["head", "block", "chain_reorg"]
ArrivalKind = Literal["block", "head", "reorg"]
SyncState = Literal["synced", "out_of_sync"]

REPORTED_PERCENTILES: Final[tuple[int, ...]] = (10, 20, 30, 40, 50, 60, 70, 80, 90, 95, 99)
MAX_HEAD_LAG_SLOTS: Final = 2

_ARRIVAL_KIND: Final[dict[str, ArrivalKind]] = {"block": "block", "head": "head", "chain_reorg": "reorg"}


@dataclass(frozen=True)
class StreamEvent:
    kind: StreamKind
    slot: int
    root: str
    receipt_ms: int
    node_id: str
    depth: Optional[int] = None
    old_head: str = ""
    new_head: str = ""


@dataclass(frozen=True)
class ArrivalRecord:
    node_id: str
    location: str
    client: str
    slot: int
    arrival_offset_ms: int
    event_kind: ArrivalKind = "block"
    root: str = ""
    skew_flagged: bool = False

    def __post_init__(self) -> None:
        if self.arrival_offset_ms < 0:
            raise ValueError("arrival offsets are clamped to zero before recording")


def record_arrival(
    event: StreamEvent,
    slot_clock: SlotClock,
    *,
    location: str = "",
    client: str = "",
    tolerance_ms: Optional[int] = None,
) -> ArrivalRecord:
    tolerance = settings.clock_tolerance_ms if tolerance_ms is None else tolerance_ms
    offset = slot_clock.offset_ms(event.slot, event.receipt_ms)
    skewed = False
    if offset < 0:
        if -offset > tolerance:
            raise ClockSkewError(event.slot, offset, tolerance)
        logger.warning("Clock skew on %s: slot %s event seen %s ms early; clamped.", event.node_id, event.slot, -offset)
        offset = 0
        skewed = True
    return ArrivalRecord(
        node_id=event.node_id,
        location=location,
        client=client,
        slot=event.slot,
        arrival_offset_ms=offset,
        event_kind=_ARRIVAL_KIND[event.kind],
        root=event.root,
        skew_flagged=skewed,
    )


# --- latency distribution ----------------------------------------------------


@dataclass(frozen=True)
class CdfResult:
    count: int
    points: tuple[tuple[int, int], ...] = ()
    mean_ms: Optional[float] = None

    @property
    def empty(self) -> bool:
        return self.count == 0

    def at(self, percentile: int) -> int:
        for p, value in self.points:
            if p == percentile:
                return value
        raise KeyError(percentile)


def nearest_rank(sorted_values: Sequence[int], percentile: int) -> int:
    n = len(sorted_values)
    rank = max(1, (percentile * n + 99) // 100)
    return int(sorted_values[rank - 1])


def offsets_cdf(offsets: Iterable[int], percentiles: Sequence[int] = REPORTED_PERCENTILES) -> CdfResult:
    values = np.sort(np.fromiter((int(v) for v in offsets), dtype=np.int64))
    if values.size == 0:
        return CdfResult(count=0)
    points = tuple((p, nearest_rank(values, p)) for p in percentiles)
    return CdfResult(count=int(values.size), points=points, mean_ms=float(values.mean()))


def latency_cdf(records: Iterable[ArrivalRecord], percentiles: Sequence[int] = REPORTED_PERCENTILES) -> CdfResult:
    return offsets_cdf((r.arrival_offset_ms for r in records), percentiles)


def mean_offset_by(
    records: Iterable[ArrivalRecord],
    keys: Sequence[str] = ("client", "location"),
) -> dict[tuple[str, ...], tuple[int, float]]:
    """(count, mean offset) per key tuple."""
    sums: dict[tuple[str, ...], list[int]] = defaultdict(lambda: [0, 0])
    for record in records:
        key = tuple(getattr(record, k) for k in keys)
        acc = sums[key]
        acc[0] += 1
        acc[1] += record.arrival_offset_ms
    return {key: (n, total / n) for key, (n, total) in sorted(sums.items())}


# --- sync state ----------------------------------------------------------------


@dataclass(frozen=True)
class SyncSpan:
    node_id: str
    first_slot: int
    last_slot: int
    state: SyncState

    def __post_init__(self) -> None:
        if self.first_slot < 0 or self.last_slot < self.first_slot:
            raise ValueError(f"invalid span [{self.first_slot}, {self.last_slot}] for {self.node_id}")

    @property
    def slots(self) -> int:
        return self.last_slot - self.first_slot + 1


def is_out_of_sync(head_slot: int, reference_slot: int, syncing: bool = False) -> bool:
    return syncing or reference_slot - head_slot > MAX_HEAD_LAG_SLOTS


def build_sync_spans(node_id: str, out_of_sync: Sequence[bool], first_slot: int = 0) -> list[SyncSpan]:
    """Collapse per-slot out-of-sync flags into contiguous spans."""
    spans: list[SyncSpan] = []
    start = first_slot
    for offset in range(1, len(out_of_sync) + 1):
        if offset == len(out_of_sync) or out_of_sync[offset] != out_of_sync[offset - 1]:
            state: SyncState = "out_of_sync" if out_of_sync[offset - 1] else "synced"
            spans.append(SyncSpan(node_id, start, first_slot + offset - 1, state))
            start = first_slot + offset
    return spans


def out_of_sync_ratio(spans: Iterable[SyncSpan], measured_slots: int) -> dict[str, float]:
    """Percentage of measured slots each node spent out of sync."""
    if measured_slots <= 0:
        raise ValueError("out-of-sync ratio needs at least one measured slot")
    by_node: dict[str, list[SyncSpan]] = defaultdict(list)
    for span in spans:
        by_node[span.node_id].append(span)
    out: dict[str, float] = {}
    for node_id in sorted(by_node):
        ordered = sorted(by_node[node_id], key=lambda s: s.first_slot)
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.first_slot <= prev.last_slot:
                raise ValueError(f"overlapping sync spans for {node_id}")
        lagging = sum(s.slots for s in ordered if s.state == "out_of_sync")
        out[node_id] = 100.0 * lagging / measured_slots
    return out


# --- reorgs ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReorgEvent:
    node_id: str
    slot: int
    depth: int = 0
    location: str = ""
    client: str = ""
    old_head: str = ""
    new_head: str = ""

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise ValueError("reorg depth must be non-negative (0 when unknown)")


@dataclass(frozen=True)
class ReorgRow:
    group: str
    count: int
    known_depths: int
    mean_depth: Optional[float]
    delta_vs_average: float


@dataclass(frozen=True)
class ReorgStats:
    rows: tuple[ReorgRow, ...]
    total: int
    average: float

    def row(self, group: str) -> ReorgRow:
        for row in self.rows:
            if row.group == group:
                return row
        raise KeyError(group)


def reorg_stats(
    events: Iterable[ReorgEvent],
    group_by: Literal["location", "client", "node"] = "location",
    groups: Iterable[str] = (),
) -> ReorgStats:
    """Counts and mean known depth per group; ``groups`` lists groups that may have no events."""
    attr = "node_id" if group_by == "node" else group_by
    counts: dict[str, int] = {g: 0 for g in groups}
    depths: dict[str, list[int]] = defaultdict(list)
    for event in events:
        group = getattr(event, attr)
        counts[group] = counts.get(group, 0) + 1
        if event.depth > 0:
            depths[group].append(event.depth)
    total = sum(counts.values())
    average = total / len(counts) if counts else 0.0
    rows = tuple(
        ReorgRow(
            group=group,
            count=counts[group],
            known_depths=len(depths[group]),
            mean_depth=float(np.mean(depths[group])) if depths[group] else None,
            delta_vs_average=counts[group] - average,
        )
        for group in sorted(counts)
    )
    return ReorgStats(rows=rows, total=total, average=average)


# --- ingestion -------------------------------------------------------------------

_STOP = object()


class TelemetrySink:
    """Many producers, one writer thread. Items with an already seen key are dropped."""

    def __init__(self, writer: Callable[[object], None], name: str = "telemetry-writer") -> None:
        self._writer = writer
        self._queue: "queue.Queue[object]" = queue.Queue()
        self._seen: set[Hashable] = set()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._drain, daemon=True, name=name)
        self.accepted = 0
        self.duplicates = 0
        self.errors = 0

    def start(self) -> "TelemetrySink":
        self._thread.start()
        return self

    def submit(self, item: object, key: Optional[Hashable] = None) -> bool:
        if key is not None:
            with self._lock:
                if key in self._seen:
                    self.duplicates += 1
                    return False
                self._seen.add(key)
        self._queue.put(item)
        return True

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            try:
                self._writer(item)
                self.accepted += 1
            except Exception as exc:
                self.errors += 1
                logger.warning("Telemetry writer failed: %s", exc)

    def close(self, timeout: Optional[float] = None) -> None:
        self._queue.put(_STOP)
        if self._thread.is_alive():
            self._thread.join(timeout)

    def __enter__(self) -> "TelemetrySink":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.close()
