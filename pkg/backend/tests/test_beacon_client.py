from __future__ import annotations

import threading

import httpx
import pytest

ROOT_A = "0x" + "ab" * 32
ROOT_B = "0x" + "cd" * 32

SSE_FIRST = (
    ": keepalive\n"
    "\n"
    "event: block\n"
    f'data: {{"slot": "7", "block": "{ROOT_A}"}}\n'
    "\n"
    "event: head\n"
    f'data: {{"slot": 7, "block": "{ROOT_A}", "state": "{ROOT_B}"}}\n'
    "\n"
    "event: block\n"
    "data: {not json\n"
    "\n"
    "event: chain_reorg\n"
    f'data: {{"slot": 7, "depth": 2, "old_head_block": "{ROOT_B}", "new_head_block": "{ROOT_A}"}}\n'
    "\n"
)
SSE_SECOND = f'event: block\ndata: {{"slot": 8, "block": "{ROOT_B}"}}\n\n'


def _endpoint(node_id="n1", retries=3):
    from backend.app.services.beacon_client import NodeEndpoint

    return NodeEndpoint(f"http://{node_id}.test", node_id, "eu", "teku", timeout_ms=1000, max_retries=retries)


def _summary_payload(slot=5):
    return {
        "version": "summary",
        "data": {
            "slot": str(slot),
            "proposer_index": "12",
            "parent_root": ROOT_A,
            "root": ROOT_B,
            "aggregates": [{"attested_slot": slot - 1, "committee_index": 0, "aggregation_bits": "1101"}],
            "sync_participation": 300,
        },
    }


def test_stream_parses_events_and_marks_gaps():
    from backend.app.services.beacon_client import BeaconClient, GapMarker, backoff_ms
    from backend.app.services.telemetry import StreamEvent

    responses = iter(
        [
            httpx.Response(200, text=SSE_FIRST, headers={"content-type": "text/event-stream"}),
            httpx.Response(500),
            httpx.Response(200, text=SSE_SECOND, headers={"content-type": "text/event-stream"}),
            httpx.Response(204),
        ]
    )
    seen_params = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen_params.append(request.url.params.get("topics"))
        return next(responses)

    clock = iter([5_000, 4_000, 6_000, 7_000, 8_000, 9_000, 10_000])
    sleeps = []
    client = BeaconClient(
        httpx.Client(transport=httpx.MockTransport(handler)), sleep=sleeps.append, now_ms=lambda: next(clock)
    )
    items = list(client.subscribe_events(_endpoint()))

    events = [i for i in items if isinstance(i, StreamEvent)]
    assert [(e.kind, e.slot) for e in events] == [("block", 7), ("head", 7), ("chain_reorg", 7), ("block", 8)]
    assert events[2].depth == 2 and events[2].old_head == ROOT_B
    receipts = [e.receipt_ms for e in events]
    assert receipts == sorted(receipts)

    gaps = [i for i in items if isinstance(i, GapMarker)]
    assert len(gaps) == 1 and gaps[0].attempts == 2
    assert items.index(gaps[0]) == 3
    assert sleeps == [backoff_ms(1) / 1000, backoff_ms(2) / 1000, backoff_ms(1) / 1000]
    assert seen_params[0] == "head,block,chain_reorg"


def test_stream_gives_up_after_max_retries():
    from backend.app.services.beacon_client import BeaconClient, EndpointDown

    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("connection refused", request=request)

    sleeps = []
    client = BeaconClient(httpx.Client(transport=httpx.MockTransport(handler)), sleep=sleeps.append)
    items = list(client.subscribe_events(_endpoint(retries=2)))
    assert len(items) == 1 and isinstance(items[0], EndpointDown)
    assert "refused" in items[0].reason
    assert len(sleeps) == 2


def test_stream_rejects_unknown_topics():
    from backend.app.errors import ConfigError
    from backend.app.services.beacon_client import BeaconClient

    with pytest.raises(ConfigError):
        list(BeaconClient(sleep=lambda _: None).subscribe_events(_endpoint(), kinds=("blob_sidecar",)))


def test_stream_stops_when_asked():
    from backend.app.services.beacon_client import BeaconClient

    stop = threading.Event()
    stop.set()
    client = BeaconClient(httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    assert list(client.subscribe_events(_endpoint(), stop=stop)) == []


def test_block_production_outcomes():
    from backend.app.services.beacon_client import BeaconClient, Unavailable
    from backend.app.services.block_scorer import BlockSummary

    def handler(request: httpx.Request) -> httpx.Response:
        slot = int(request.url.path.rsplit("/", 1)[-1])
        assert request.url.params.get("summary") == "true"
        if slot == 5:
            return httpx.Response(200, json=_summary_payload(5))
        if slot == 6:
            return httpx.Response(503)
        if slot == 7:
            return httpx.Response(500)
        if slot == 8:
            return httpx.Response(200, text="{}")
        if slot == 9:
            return httpx.Response(200, json=_summary_payload(4))
        if slot == 10:
            raise httpx.ReadTimeout("slow node", request=request)
        raise httpx.ConnectError("refused", request=request)

    client = BeaconClient(httpx.Client(transport=httpx.MockTransport(handler)))
    endpoint = _endpoint()

    block = client.request_block_production(endpoint, 5)
    assert isinstance(block, BlockSummary)
    assert block.proposer_id == 12 and block.sync_participation == 300
    assert block.source_label.node_id == "n1" and block.source_label.location == "eu"
    assert block.aggregates[0].bitstring() == "1101"

    reasons = {slot: client.request_block_production(endpoint, slot) for slot in range(6, 12)}
    assert all(isinstance(r, Unavailable) for r in reasons.values())
    assert {slot: r.reason for slot, r in reasons.items()} == {
        6: "out_of_sync",
        7: "protocol_error",
        8: "protocol_error",
        9: "protocol_error",
        10: "timeout",
        11: "endpoint_down",
    }


def test_block_production_after_deadline_is_a_timeout():
    from backend.app.services.beacon_client import BeaconClient
    from backend.app.services.chain import SlotClock

    clock = SlotClock()
    late = clock.slot_start_ms(5) + 4_001
    client = BeaconClient(
        httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json=_summary_payload(5)))),
        now_ms=lambda: late,
    )
    result = client.request_block_production(_endpoint(), 5, slot_clock=clock)
    assert result.reason == "timeout"


def test_plain_requests():
    from backend.app.errors import EndpointDownError
    from backend.app.services.beacon_client import BeaconClient, SyncStatus

    def handler(request: httpx.Request) -> httpx.Response:
        path = request.url.path
        if path.endswith("/node/syncing"):
            return httpx.Response(
                200, json={"data": {"head_slot": "40", "sync_distance": "3", "is_syncing": True, "el_offline": False}}
            )
        if path.endswith("/genesis"):
            return httpx.Response(200, json={"data": {"genesis_time": "1606824023", "genesis_validators_root": ROOT_A}})
        if path.endswith("/committees"):
            assert request.url.params.get("epoch") == "2"
            return httpx.Response(200, json={"data": [{"index": "0", "slot": "64", "validators": ["1", "5"]}]})
        if path.endswith("/blocks/3"):
            return httpx.Response(404)
        if path.endswith("/blocks/4"):
            return httpx.Response(200, json=_summary_payload(4))
        return httpx.Response(500)

    client = BeaconClient(httpx.Client(transport=httpx.MockTransport(handler)))
    endpoint = _endpoint()
    assert client.get_sync_status(endpoint) == SyncStatus(True, 40, 3)
    assert client.get_genesis(endpoint).genesis_time == 1606824023
    assert client.get_committees(endpoint, 2) == {(64, 0): (1, 5)}
    assert client.get_block_summary(endpoint, 3) is None
    assert client.get_block_summary(endpoint, 4).slot == 4
    with pytest.raises(EndpointDownError):
        client.get_block_summary(endpoint, 99)

    def refuse(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("refused", request=request)

    down = BeaconClient(httpx.Client(transport=httpx.MockTransport(refuse)))
    with pytest.raises(EndpointDownError) as exc:
        down.get_sync_status(endpoint)
    assert exc.value.node_id == "n1"


def test_fanout_requests_each_node_once_per_slot():
    from backend.app.services.beacon_client import BeaconClient, BlockProductionFanout, Unavailable

    calls = []
    lock = threading.Lock()

    def handler(request: httpx.Request) -> httpx.Response:
        with lock:
            calls.append((request.url.host, request.url.path))
        if request.url.host == "n2.test":
            return httpx.Response(503)
        return httpx.Response(200, json=_summary_payload(5))

    client = BeaconClient(httpx.Client(transport=httpx.MockTransport(handler)))
    fanout = BlockProductionFanout(client, [_endpoint("n1"), _endpoint("n2"), _endpoint("n3")])
    try:
        first = fanout.request(5, deadline_s=5)
        second = fanout.request(5, deadline_s=5)
    finally:
        fanout.close()

    assert fanout.requests_sent == 3
    assert len(calls) == 3
    assert isinstance(first["n2"], Unavailable) and first["n2"].reason == "out_of_sync"
    assert first["n1"].slot == 5 and first["n3"].slot == 5
    assert second == first


def test_backoff_doubles_up_to_cap():
    from backend.app.services.beacon_client import backoff_ms

    assert [backoff_ms(n, 500, 3000) for n in range(1, 6)] == [500, 1000, 2000, 3000, 3000]


def test_load_endpoints(tmp_path):
    from backend.app.errors import ConfigError
    from backend.app.services.beacon_client import load_endpoints

    path = tmp_path / "endpoints.txt"
    path.write_text(
        "# url node location client\n"
        "http://10.0.0.1:5052 fra-1 frankfurt lighthouse\n"
        "\n"
        "http://10.0.0.2:5052 syd-1 sydney teku   # second box\n"
    )
    endpoints = load_endpoints(path)
    assert [(e.node_id, e.location, e.client) for e in endpoints] == [
        ("fra-1", "frankfurt", "lighthouse"),
        ("syd-1", "sydney", "teku"),
    ]
    assert endpoints[0].url("/eth/v1/node/syncing") == "http://10.0.0.1:5052/eth/v1/node/syncing"

    for text in ("http://a fra-1 frankfurt\n", "http://a x l c\nhttp://b x l c\n", "# nothing\n"):
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_endpoints(path)
    with pytest.raises(ConfigError):
        load_endpoints(tmp_path / "missing.txt")
