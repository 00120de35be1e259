from __future__ import annotations

import math
import threading

import numpy as np
import pytest


def _event(slot, receipt_ms, kind="block", node_id="n1"):
    from backend.app.services.telemetry import StreamEvent

    return StreamEvent(kind, slot, "0xab", receipt_ms, node_id)


def test_record_arrival_offsets_and_skew():
    from backend.app.errors import ClockSkewError
    from backend.app.services.chain import ChainSpec, SlotClock
    from backend.app.services.telemetry import record_arrival

    clock = SlotClock(ChainSpec(genesis_time=1_000))
    on_time = record_arrival(_event(2, 1_024_000 + 1_750), clock, location="eu", client="teku", tolerance_ms=500)
    assert on_time.arrival_offset_ms == 1_750
    assert on_time.location == "eu" and not on_time.skew_flagged

    early = record_arrival(_event(2, 1_024_000 - 300), clock, tolerance_ms=500)
    assert early.arrival_offset_ms == 0 and early.skew_flagged

    with pytest.raises(ClockSkewError) as exc:
        record_arrival(_event(2, 1_024_000 - 501), clock, tolerance_ms=500)
    assert exc.value.offset_ms == -501

    reorg = record_arrival(_event(2, 1_024_100, kind="chain_reorg"), clock)
    assert reorg.event_kind == "reorg"


def test_record_arrival_uses_configured_tolerance(monkeypatch):
    from backend.app.config import settings
    from backend.app.errors import ClockSkewError
    from backend.app.services.chain import SlotClock
    from backend.app.services.telemetry import record_arrival

    monkeypatch.setattr(settings, "clock_tolerance_ms", 0)
    with pytest.raises(ClockSkewError):
        record_arrival(_event(1, 11_999), SlotClock())


def test_cdf_matches_nearest_rank_oracle():
    from backend.app.services.telemetry import REPORTED_PERCENTILES, offsets_cdf

    rng = np.random.default_rng(5)
    for _ in range(20):
        samples = rng.integers(0, 12_000, size=1000).tolist()
        cdf = offsets_cdf(samples)
        ordered = sorted(samples)
        for p in REPORTED_PERCENTILES:
            expected = ordered[math.ceil(p * len(ordered) / 100) - 1]
            assert cdf.at(p) == expected
        assert cdf.count == 1000
        assert cdf.mean_ms == pytest.approx(sum(samples) / 1000)


def test_cdf_small_fixture():
    from backend.app.services.telemetry import latency_cdf, offsets_cdf

    cdf = offsets_cdf([5000, 1000, 4000, 2000, 3000])
    assert cdf.at(50) == 3000
    assert cdf.at(10) == 1000
    assert cdf.at(99) == 5000
    assert offsets_cdf([]).empty
    assert latency_cdf([]).count == 0
    with pytest.raises(KeyError):
        cdf.at(42)


def test_mean_offset_by_client_and_location():
    from backend.app.services.telemetry import ArrivalRecord, mean_offset_by

    records = [
        ArrivalRecord("a", "eu", "teku", 1, 1000),
        ArrivalRecord("b", "eu", "teku", 1, 2000),
        ArrivalRecord("c", "ap", "prysm", 1, 4000),
    ]
    assert mean_offset_by(records) == {("prysm", "ap"): (1, 4000.0), ("teku", "eu"): (2, 1500.0)}


def test_sync_spans_and_ratio():
    from backend.app.services.telemetry import SyncSpan, build_sync_spans, is_out_of_sync, out_of_sync_ratio

    assert not is_out_of_sync(8, 10)
    assert is_out_of_sync(7, 10)
    assert is_out_of_sync(10, 10, syncing=True)

    spans = build_sync_spans("n1", [False, False, True, True, True, False], first_slot=10)
    assert [(s.first_slot, s.last_slot, s.state) for s in spans] == [
        (10, 11, "synced"),
        (12, 14, "out_of_sync"),
        (15, 15, "synced"),
    ]
    assert build_sync_spans("n1", []) == []
    assert out_of_sync_ratio(spans, 6) == {"n1": 50.0}

    with pytest.raises(ValueError):
        out_of_sync_ratio([SyncSpan("n1", 0, 5, "synced"), SyncSpan("n1", 5, 6, "out_of_sync")], 7)
    with pytest.raises(ValueError):
        out_of_sync_ratio(spans, 0)


def test_reorg_stats_include_quiet_groups():
    from backend.app.services.telemetry import ReorgEvent, reorg_stats

    events = [
        ReorgEvent("s1", 10, depth=1, location="sydney"),
        ReorgEvent("s1", 20, depth=3, location="sydney"),
        ReorgEvent("f1", 30, depth=0, location="frankfurt"),
    ]
    stats = reorg_stats(events, "location", groups=["frankfurt", "sydney", "virginia"])
    assert stats.total == 3 and stats.average == 1.0
    assert stats.row("sydney").count == 2
    assert stats.row("sydney").mean_depth == 2.0
    assert stats.row("frankfurt").mean_depth is None
    assert stats.row("virginia").count == 0
    assert stats.row("virginia").delta_vs_average == -1.0

    with pytest.raises(ValueError):
        ReorgEvent("x", 1, depth=-1)


def test_sink_single_writer_dedupes_keys():
    from backend.app.services.telemetry import TelemetrySink

    written = []
    writer_threads = set()

    def writer(item):
        writer_threads.add(threading.current_thread().name)
        written.append(item)

    sink = TelemetrySink(writer).start()

    def produce(offset):
        for i in range(100):
            sink.submit(("row", i), key=i)
            sink.submit(("free", offset, i))

    producers = [threading.Thread(target=produce, args=(n,)) for n in range(4)]
    for t in producers:
        t.start()
    for t in producers:
        t.join()
    sink.close(timeout=5)

    assert sink.accepted == 500
    assert sink.duplicates == 300
    assert len([w for w in written if w[0] == "row"]) == 100
    assert writer_threads == {"telemetry-writer"}


def test_sink_survives_writer_errors():
    from backend.app.services.telemetry import TelemetrySink

    def writer(item):
        if item == "bad":
            raise RuntimeError("disk full")

    with TelemetrySink(writer) as sink:
        sink.submit("ok")
        sink.submit("bad")
        sink.submit("ok again")
    assert sink.accepted == 2 and sink.errors == 1
