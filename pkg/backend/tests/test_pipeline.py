from __future__ import annotations

from pathlib import Path

import pytest

PRESETS = Path(__file__).resolve().parents[2] / "presets"


@pytest.fixture(scope="module")
def faults_run():
    from backend.app.services.scenario import load_scenario
    from backend.app.services.simulator import run

    return run(load_scenario(PRESETS / "faults.cfg"))


def test_simulation_counts_and_conservation(faults_run, tmp_path):
    from backend.app.record_log import RecordLog
    from backend.app.services.pipeline import ingest

    log = RecordLog(tmp_path / "run.log")
    summary = ingest("simulate", log, result=faults_run)
    assert summary.rejected_arrivals == 0
    assert summary.appended == sum(summary.counts.values())
    assert summary.counts["epoch_performance"] == 128 * 3
    assert summary.counts["block_score"] == 96 * 3
    assert summary.counts["reorg"] == len(faults_run.truth.reorgs)

    read = log.verify()
    assert read.counts() == summary.counts
    totals = [r for r in read.rows("ground_truth") if r.kind == "stream_totals"]
    assert sum(t.emitted - t.dropped for t in totals) == summary.counts["arrival"]
    watcher = next(t for t in totals if t.node_id == "watcher")
    assert watcher.dropped > 0
    run_row = next(r for r in read.rows("ground_truth") if r.kind == "run")
    assert (run_row.scenario, run_row.seed, run_row.validators) == ("faults", 3, 128)


def test_skewed_arrivals_are_clamped_and_flagged(faults_run):
    from backend.app.services.pipeline import simulated_arrivals

    arrivals, rejected = simulated_arrivals(faults_run)
    assert rejected == 0
    watcher = [a for a in arrivals if a.node_id == "watcher"]
    flagged = [a for a in watcher if a.skew_flagged]
    assert sorted(a.slot for a in flagged) == list(range(10, 20))
    assert all(a.arrival_offset_ms == 0 for a in flagged)
    assert not any(a.skew_flagged for a in arrivals if a.node_id != "watcher")

    # With no tolerance the same events are rejected instead.
    _, strict_rejected = simulated_arrivals(faults_run, tolerance_ms=0)
    assert strict_rejected == 10


def test_block_scores_mark_unavailable_nodes(faults_run):
    from backend.app.services.pipeline import simulated_block_scores

    rows = simulated_block_scores(faults_run)
    by_key = {(r.slot, r.node_id): r for r in rows}
    assert by_key[(45, "lab-2")].status == "out_of_sync"
    assert by_key[(45, "lab-2")].score is None
    assert by_key[(80, "lab-1")].status == "timeout"
    assert by_key[(81, "lab-1")].status == "timeout"

    for slot in range(96):
        ranked = sorted(r.rank for r in rows if r.slot == slot and r.status == "ok")
        assert ranked == list(range(1, len(ranked) + 1))
        best = [r for r in rows if r.slot == slot and r.rank == 1]
        if best and best[0].score:
            assert best[0].normalized == 1.0


def test_performance_rows_round_trip_to_domain(faults_run):
    from backend.app.services.pipeline import performance_from_row, performance_row

    for perf in faults_run.truth.performances[:50]:
        back = performance_from_row(performance_row(perf))
        assert back.achieved_reward == pytest.approx(perf.achieved_reward)
        assert back.flags == perf.flags
        assert (back.location, back.client, back.node_id) == (perf.location, perf.client, perf.node_id)


def test_same_seed_writes_identical_logs(tmp_path):
    from backend.app.record_log import RecordLog
    from backend.app.services.pipeline import ingest_simulation
    from backend.app.services.scenario import load_scenario
    from backend.app.services.simulator import run

    config = load_scenario(PRESETS / "ideal.cfg")
    first, second = RecordLog(tmp_path / "a.log"), RecordLog(tmp_path / "b.log")
    ingest_simulation(run(config), first)
    ingest_simulation(run(config), second)
    assert first.path.read_bytes() == second.path.read_bytes()


def test_replay_is_idempotent(faults_run, tmp_path):
    from backend.app.record_log import RecordLog
    from backend.app.services.pipeline import ingest, ingest_simulation

    source = RecordLog(tmp_path / "source.log")
    ingest_simulation(faults_run, source, with_block_scores=False)
    copy = RecordLog(tmp_path / "copy.log")

    first = ingest("replay", copy, replay_from=source)
    assert first.appended == len(source.read().records) and first.skipped == 0
    second = ingest("replay", copy, replay_from=source)
    assert second.appended == 0 and second.skipped == first.appended
    assert copy.path.read_bytes() == source.path.read_bytes()

    same = ingest("replay", source, replay_from=source)
    assert same.appended == 0


def test_ingest_requires_its_inputs(tmp_path):
    from backend.app.errors import ConfigError
    from backend.app.record_log import RecordLog
    from backend.app.services.pipeline import ingest

    log = RecordLog(tmp_path / "run.log")
    with pytest.raises(ConfigError):
        ingest("simulate", log)
    with pytest.raises(ConfigError):
        ingest("replay", log)
    with pytest.raises(ConfigError):
        ingest("live", log)
    with pytest.raises(ConfigError):
        ingest("carrier-pigeon", log)  # type: ignore[arg-type]
