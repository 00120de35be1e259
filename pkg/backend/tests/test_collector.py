from __future__ import annotations

from pathlib import Path

import httpx
from fastapi.testclient import TestClient

PRESETS = Path(__file__).resolve().parents[2] / "presets"
NOW_MS = 200 * 12_000


def _refuse(request: httpx.Request) -> httpx.Response:
    raise httpx.ConnectError("connection refused", request=request)


def test_collect_from_simulated_nodes_with_one_endpoint_down(tmp_path):
    from backend.app.collector import Collector
    from backend.app.main import create_app
    from backend.app.record_log import RecordLog
    from backend.app.services.beacon_client import BeaconClient, NodeEndpoint
    from backend.app.services.chain import root_hex
    from backend.app.services.scenario import load_scenario
    from backend.app.services.sim_node import SimNode
    from backend.app.services.simulator import run

    result = run(load_scenario(PRESETS / "faults.cfg"))
    endpoints = [
        NodeEndpoint("http://ghost.test", "ghost", "nowhere", "nimbus", timeout_ms=1000, max_retries=1),
        NodeEndpoint("http://lab-1.test", "lab-1", "lab", "lighthouse", timeout_ms=1000, max_retries=1),
        NodeEndpoint("http://lab-2.test", "lab-2", "lab", "teku", timeout_ms=1000, max_retries=1),
    ]
    clients = {
        "ghost": httpx.Client(transport=httpx.MockTransport(_refuse)),
        "lab-1": TestClient(create_app(SimNode(result, "lab-1", speed=0))),
        "lab-2": TestClient(create_app(SimNode(result, "lab-2", speed=0))),
    }
    beacon = BeaconClient(clients=clients, sleep=lambda _: None, now_ms=lambda: NOW_MS)
    collector = Collector(
        endpoints,
        client=beacon,
        enforce_deadline=False,
        sleep=lambda _: None,
        now_ms=lambda: NOW_MS,
    )

    log = RecordLog(tmp_path / "live.log")
    summary = collector.run(log, duration_slots=8, first_slot=40)

    assert set(summary.endpoints_failed) == {"ghost"}
    assert "refused" in summary.endpoints_failed["ghost"]
    assert summary.counts["block_score"] == 8 * 3
    assert summary.counts["epoch_performance"] == 0

    read = log.verify()
    assert read.counts() == summary.counts
    scores = read.rows("block_score")
    assert {r.status for r in scores if r.node_id == "ghost"} == {"endpoint_down"}
    assert {r.status for r in scores if r.node_id == "lab-2"} == {"out_of_sync"}
    lab_1 = [r for r in scores if r.node_id == "lab-1"]
    assert all(r.status == "ok" and r.rank == 1 for r in lab_1)

    spans = read.rows("sync_span")
    ghost = [s for s in spans if s.node_id == "ghost"]
    assert [(s.first_slot, s.last_slot, s.state) for s in ghost] == [(40, 47, "out_of_sync")]
    assert {s.node_id for s in spans} == {"ghost", "lab-1", "lab-2"}

    served = {root_hex(e.root) for e in result.events("lab-1") if e.kind == "block"}
    arrivals = read.rows("arrival")
    assert {a.node_id for a in arrivals} <= {"lab-1", "lab-2"}
    assert {a.root for a in arrivals if a.node_id == "lab-1"} <= served


def test_collector_without_any_genesis_answer(tmp_path):
    from backend.app.collector import Collector
    from backend.app.record_log import RecordLog
    from backend.app.services.beacon_client import BeaconClient, NodeEndpoint

    endpoint = NodeEndpoint("http://ghost.test", "ghost", "nowhere", "nimbus", timeout_ms=1000, max_retries=0)
    beacon = BeaconClient(clients={"ghost": httpx.Client(transport=httpx.MockTransport(_refuse))}, sleep=lambda _: None)
    summary = Collector([endpoint], client=beacon, sleep=lambda _: None).run(RecordLog(tmp_path / "live.log"))
    assert summary.endpoints_failed == {"ghost": "connection refused"}
    assert summary.appended == 0
    assert not (tmp_path / "live.log").exists()
