"""
Client for the beacon API subset slotwatch needs: the SSE event stream,
block production, sync status, genesis, committees and block summaries.

Works against real beacon nodes and against simulated nodes served by
``backend.app.main``. Offsets measured against real nodes include the
node's own validation time before it emits an event.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Literal, Mapping, Optional, Sequence, Union

import httpx
from pydantic import ValidationError

from ..config import settings
from ..errors import ConfigError, DataError, EndpointDownError
from ..schemas import (
    BlockEventData,
    BlockSummaryResponse,
    ChainReorgEventData,
    CommitteesResponse,
    GenesisData,
    GenesisResponse,
    HeadEventData,
    SyncingResponse,
)
from .block_scorer import BlockSummary, SourceLabel
from .chain import SlotClock
from .telemetry import StreamEvent

logger = logging.getLogger(__name__)

EVENT_KINDS: tuple[str, ...] = ("head", "block", "chain_reorg")
# Long-lived streams only see keepalive comments between events.
STREAM_READ_TIMEOUT_S = 60.0

UnavailableReason = Literal["out_of_sync", "timeout", "protocol_error", "endpoint_down"]


def _wall_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class NodeEndpoint:
    base_url: str
    node_id: str
    location: str
    client: str
    timeout_ms: int = field(default_factory=lambda: settings.client.request_timeout_ms)
    max_retries: int = field(default_factory=lambda: settings.client.max_retries)

    def __post_init__(self) -> None:
        for name in ("base_url", "node_id", "location", "client"):
            if not getattr(self, name).strip():
                raise ConfigError(f"endpoint {name} must be non-empty")
        if self.timeout_ms <= 0:
            raise ConfigError(f"endpoint {self.node_id}: timeout must be positive")
        if self.max_retries < 0:
            raise ConfigError(f"endpoint {self.node_id}: max_retries must be non-negative")

    @property
    def label(self) -> SourceLabel:
        return SourceLabel(self.node_id, self.location, self.client)

    def url(self, path: str) -> str:
        return self.base_url.rstrip("/") + path


def load_endpoints(path: str | Path) -> list[NodeEndpoint]:
    """Endpoints file: ``URL node_id location client`` per line, ``#`` starts a comment."""
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read endpoints file {source}: {exc}") from exc
    endpoints: list[NodeEndpoint] = []
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ConfigError(f"{source}:{line_no}: expected 'URL node_id location client', got {raw.strip()!r}")
        url, node_id, location, client = parts
        if node_id in seen:
            raise ConfigError(f"{source}:{line_no}: duplicate node id {node_id!r}")
        seen.add(node_id)
        endpoints.append(NodeEndpoint(url, node_id, location, client))
    if not endpoints:
        raise ConfigError(f"{source}: no endpoints defined")
    return endpoints


@dataclass(frozen=True)
class GapMarker:
    """Emitted when a stream resumes after a disconnect; events in between may be lost."""

    node_id: str
    receipt_ms: int
    attempts: int
    reason: str = ""


@dataclass(frozen=True)
class EndpointDown:
    node_id: str
    reason: str


@dataclass(frozen=True)
class Unavailable:
    node_id: str
    slot: int
    reason: UnavailableReason
    detail: str = ""


@dataclass(frozen=True)
class SyncStatus:
    is_syncing: bool
    head_slot: int
    sync_distance: int = 0


StreamItem = Union[StreamEvent, GapMarker, EndpointDown]
ProductionResult = Union[BlockSummary, Unavailable]


def backoff_ms(attempt: int, base_ms: Optional[int] = None, cap_ms: Optional[int] = None) -> int:
    base = settings.client.backoff_base_ms if base_ms is None else base_ms
    cap = settings.client.backoff_cap_ms if cap_ms is None else cap_ms
    return min(cap, base * 2 ** max(0, attempt - 1))


def _event_from_payload(kind: str, data: str, receipt_ms: int, node_id: str) -> Optional[StreamEvent]:
    payload = json.loads(data)
    if kind == "block":
        block = BlockEventData.model_validate(payload)
        return StreamEvent("block", block.slot, block.block, receipt_ms, node_id)
    if kind == "head":
        head = HeadEventData.model_validate(payload)
        return StreamEvent("head", head.slot, head.block, receipt_ms, node_id)
    if kind == "chain_reorg":
        reorg = ChainReorgEventData.model_validate(payload)
        return StreamEvent(
            "chain_reorg",
            reorg.slot,
            reorg.new_head_block,
            receipt_ms,
            node_id,
            depth=reorg.depth,
            old_head=reorg.old_head_block,
            new_head=reorg.new_head_block,
        )
    return None


class _StreamFailure(Exception):
    pass


class BeaconClient:
    """
    Sync httpx client shared by all endpoints. ``clients`` maps node ids to
    dedicated httpx clients (tests hand in one per simulated node).
    """

    def __init__(
        self,
        http: Optional[httpx.Client] = None,
        *,
        clients: Optional[Mapping[str, httpx.Client]] = None,
        sleep: Callable[[float], None] = time.sleep,
        now_ms: Callable[[], int] = _wall_ms,
    ) -> None:
        self._owns_http = http is None
        self._http = http or httpx.Client(follow_redirects=True)
        self._clients = dict(clients or {})
        self._sleep = sleep
        self._now_ms = now_ms
        self._last_receipt: dict[str, int] = {}
        self._receipt_lock = threading.Lock()

    def close(self) -> None:
        if self._owns_http:
            self._http.close()

    def __enter__(self) -> "BeaconClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _http_for(self, endpoint: NodeEndpoint) -> httpx.Client:
        return self._clients.get(endpoint.node_id, self._http)

    def _receipt(self, node_id: str) -> int:
        now = self._now_ms()
        with self._receipt_lock:
            stamp = max(now, self._last_receipt.get(node_id, now))
            self._last_receipt[node_id] = stamp
        return stamp

    # --- events -------------------------------------------------------------

    def _parse_stream(self, lines: Iterable[str], endpoint: NodeEndpoint) -> Iterator[StreamEvent]:
        kind: Optional[str] = None
        data: list[str] = []
        receipt: Optional[int] = None
        for line in lines:
            if line == "":
                if kind and data and receipt is not None:
                    try:
                        event = _event_from_payload(kind, "\n".join(data), receipt, endpoint.node_id)
                    except (ValueError, ValidationError) as exc:
                        logger.warning("Skipping malformed %s event from %s: %s", kind, endpoint.node_id, exc)
                        event = None
                    if event is not None:
                        yield event
                kind, data, receipt = None, [], None
                continue
            if line.startswith(":"):
                continue
            if receipt is None:
                receipt = self._receipt(endpoint.node_id)
            name, _, value = line.partition(":")
            value = value[1:] if value.startswith(" ") else value
            if name == "event":
                kind = value
            elif name == "data":
                data.append(value)

    def subscribe_events(
        self,
        endpoint: NodeEndpoint,
        kinds: Sequence[str] = EVENT_KINDS,
        *,
        stop: Optional[threading.Event] = None,
    ) -> Iterator[StreamItem]:
        """
        Events in wire order. Disconnects are retried with exponential backoff
        and announced by a GapMarker once the stream resumes; after
        ``max_retries`` consecutive failures an EndpointDown ends the stream.
        A 204 response means the node has nothing more to serve.
        """
        unknown = set(kinds) - set(EVENT_KINDS)
        if unknown:
            raise ConfigError(f"unknown event topics: {sorted(unknown)}")
        http = self._http_for(endpoint)
        url = endpoint.url(settings.api.events)
        timeout = httpx.Timeout(endpoint.timeout_ms / 1000, read=STREAM_READ_TIMEOUT_S)
        failures = 0
        connected = False
        reason = ""
        while not (stop and stop.is_set()):
            try:
                with http.stream(
                    "GET",
                    url,
                    params={"topics": ",".join(kinds)},
                    headers={"Accept": "text/event-stream"},
                    timeout=timeout,
                ) as response:
                    if response.status_code == 204:
                        return
                    if response.status_code != 200:
                        raise _StreamFailure(f"HTTP {response.status_code}")
                    if connected:
                        yield GapMarker(endpoint.node_id, self._receipt(endpoint.node_id), failures, reason)
                    connected = True
                    failures = 0
                    yield from self._parse_stream(response.iter_lines(), endpoint)
                    reason = "stream closed"
            except (httpx.HTTPError, _StreamFailure) as exc:
                reason = str(exc) or exc.__class__.__name__
            if stop and stop.is_set():
                return
            failures += 1
            if failures > endpoint.max_retries:
                logger.warning("Event stream from %s is down after %s attempts: %s", endpoint.node_id, failures, reason)
                yield EndpointDown(endpoint.node_id, reason)
                return
            delay = backoff_ms(failures)
            logger.warning("Event stream from %s interrupted (%s); retrying in %s ms.", endpoint.node_id, reason, delay)
            self._sleep(delay / 1000)

    # --- block production ------------------------------------------------------------

    def request_block_production(
        self,
        endpoint: NodeEndpoint,
        slot: int,
        *,
        slot_clock: Optional[SlotClock] = None,
    ) -> ProductionResult:
        """
        Candidate block summary for ``slot``. With a slot clock, a response
        arriving after the attestation deadline counts as a timeout.
        """
        timeout_s = endpoint.timeout_ms / 1000
        deadline_ms: Optional[int] = None
        if slot_clock is not None:
            deadline_ms = slot_clock.slot_start_ms(slot) + slot_clock.spec.attestation_deadline_ms
            timeout_s = max(0.001, min(timeout_s, (deadline_ms - self._now_ms()) / 1000))
        url = endpoint.url(f"{settings.api.produce_block}/{slot}")
        try:
            response = self._http_for(endpoint).get(url, params={"summary": "true"}, timeout=timeout_s)
        except httpx.TimeoutException as exc:
            return Unavailable(endpoint.node_id, slot, "timeout", str(exc))
        except httpx.HTTPError as exc:
            logger.warning("Block production request to %s failed: %s", endpoint.node_id, exc)
            return Unavailable(endpoint.node_id, slot, "endpoint_down", str(exc))
        if deadline_ms is not None and self._now_ms() > deadline_ms:
            return Unavailable(endpoint.node_id, slot, "timeout", "response after attestation deadline")
        if response.status_code == 503:
            return Unavailable(endpoint.node_id, slot, "out_of_sync")
        if response.status_code != 200:
            return Unavailable(endpoint.node_id, slot, "protocol_error", f"HTTP {response.status_code}")
        try:
            summary = BlockSummaryResponse.model_validate_json(response.content).data.to_summary(endpoint.label)
        except (ValidationError, DataError, ValueError) as exc:
            return Unavailable(endpoint.node_id, slot, "protocol_error", str(exc))
        if summary.slot != slot:
            return Unavailable(endpoint.node_id, slot, "protocol_error", f"candidate for slot {summary.slot}")
        return summary

    # --- plain requests ---------------------------------------------------------------

    def _get_json(self, endpoint: NodeEndpoint, path: str, params: Optional[dict] = None) -> httpx.Response:
        try:
            response = self._http_for(endpoint).get(
                endpoint.url(path), params=params, timeout=endpoint.timeout_ms / 1000
            )
        except httpx.HTTPError as exc:
            raise EndpointDownError(endpoint.node_id, str(exc) or exc.__class__.__name__) from exc
        return response

    def get_sync_status(self, endpoint: NodeEndpoint) -> SyncStatus:
        response = self._get_json(endpoint, settings.api.syncing)
        if response.status_code != 200:
            raise EndpointDownError(endpoint.node_id, f"HTTP {response.status_code}")
        try:
            data = SyncingResponse.model_validate_json(response.content).data
        except ValidationError as exc:
            raise EndpointDownError(endpoint.node_id, f"malformed sync status: {exc.errors()[0]['msg']}") from exc
        return SyncStatus(data.is_syncing, data.head_slot, data.sync_distance)

    def get_genesis(self, endpoint: NodeEndpoint) -> GenesisData:
        response = self._get_json(endpoint, settings.api.genesis)
        if response.status_code != 200:
            raise EndpointDownError(endpoint.node_id, f"HTTP {response.status_code}")
        try:
            return GenesisResponse.model_validate_json(response.content).data
        except ValidationError as exc:
            raise EndpointDownError(endpoint.node_id, f"malformed genesis: {exc.errors()[0]['msg']}") from exc

    def get_committees(self, endpoint: NodeEndpoint, epoch: int) -> dict[tuple[int, int], tuple[int, ...]]:
        response = self._get_json(endpoint, settings.api.committees, {"epoch": epoch})
        if response.status_code != 200:
            raise EndpointDownError(endpoint.node_id, f"HTTP {response.status_code}")
        try:
            data = CommitteesResponse.model_validate_json(response.content).data
        except ValidationError as exc:
            raise EndpointDownError(endpoint.node_id, f"malformed committees: {exc.errors()[0]['msg']}") from exc
        return {(c.slot, c.index): tuple(c.validators) for c in data}

    def get_block_summary(self, endpoint: NodeEndpoint, slot: int) -> Optional[BlockSummary]:
        """Canonical block at ``slot`` as a summary; None for an empty slot."""
        response = self._get_json(endpoint, f"{settings.api.beacon_block}/{slot}", {"summary": "true"})
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            raise EndpointDownError(endpoint.node_id, f"HTTP {response.status_code}")
        try:
            return BlockSummaryResponse.model_validate_json(response.content).data.to_summary(endpoint.label)
        except ValidationError as exc:
            raise EndpointDownError(endpoint.node_id, f"malformed block: {exc.errors()[0]['msg']}") from exc


# Module-level helpers mirror the other service modules: one short-lived client per call.


def subscribe_events(endpoint: NodeEndpoint, kinds: Sequence[str] = EVENT_KINDS) -> Iterator[StreamItem]:
    with BeaconClient() as client:
        yield from client.subscribe_events(endpoint, kinds)


def request_block_production(endpoint: NodeEndpoint, slot: int, slot_clock: Optional[SlotClock] = None) -> ProductionResult:
    with BeaconClient() as client:
        return client.request_block_production(endpoint, slot, slot_clock=slot_clock)


def get_sync_status(endpoint: NodeEndpoint) -> SyncStatus:
    with BeaconClient() as client:
        return client.get_sync_status(endpoint)


class BlockProductionFanout:
    """
    Requests candidates from every endpoint concurrently and joins with a
    deadline. A (node, slot) pair is requested at most once; repeated calls
    share the first request's result.
    """

    def __init__(
        self,
        client: BeaconClient,
        endpoints: Sequence[NodeEndpoint],
        *,
        slot_clock: Optional[SlotClock] = None,
        max_workers: Optional[int] = None,
        keep_slots: int = 4,
    ) -> None:
        self._client = client
        self._endpoints = list(endpoints)
        self._slot_clock = slot_clock
        self._executor = ThreadPoolExecutor(
            max_workers=max_workers or max(1, len(self._endpoints)), thread_name_prefix="block-production"
        )
        self._inflight: dict[tuple[str, int], Future] = {}
        self._lock = threading.Lock()
        self._keep_slots = keep_slots
        self.requests_sent = 0

    def _submit(self, endpoint: NodeEndpoint, slot: int) -> Future:
        key = (endpoint.node_id, slot)
        with self._lock:
            future = self._inflight.get(key)
            if future is None:
                future = self._executor.submit(
                    self._client.request_block_production, endpoint, slot, slot_clock=self._slot_clock
                )
                self._inflight[key] = future
                self.requests_sent += 1
            for stale in [k for k in self._inflight if k[1] < slot - self._keep_slots]:
                del self._inflight[stale]
        return future

    def request(self, slot: int, deadline_s: Optional[float] = None) -> dict[str, ProductionResult]:
        futures = {endpoint.node_id: self._submit(endpoint, slot) for endpoint in self._endpoints}
        if deadline_s is None and self._slot_clock is not None:
            deadline_ms = self._slot_clock.slot_start_ms(slot) + self._slot_clock.spec.attestation_deadline_ms
            deadline_s = max(0.0, (deadline_ms - self._client._now_ms()) / 1000)
        wait(futures.values(), timeout=deadline_s)
        results: dict[str, ProductionResult] = {}
        for node_id, future in futures.items():
            if not future.done():
                results[node_id] = Unavailable(node_id, slot, "timeout", "no response before deadline")
                continue
            exc = future.exception()
            if exc is not None:
                logger.warning("Block production for %s at slot %s raised: %s", node_id, slot, exc)
                results[node_id] = Unavailable(node_id, slot, "protocol_error", str(exc))
            else:
                results[node_id] = future.result()
        return results

    def close(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
