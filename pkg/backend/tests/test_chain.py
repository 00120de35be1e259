from __future__ import annotations

import hashlib

import pytest

SEED = hashlib.sha256(b"chain-tests").digest()


def _root(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


def test_chain_spec_rejects_bad_values():
    from backend.app.errors import ConfigError
    from backend.app.services.chain import ChainSpec

    with pytest.raises(ConfigError):
        ChainSpec(slots_per_epoch=0)
    with pytest.raises(ConfigError):
        ChainSpec(attestation_deadline_s=8, aggregation_deadline_s=4)
    with pytest.raises(ConfigError):
        ChainSpec(aggregation_deadline_s=12)


def test_epoch_boundaries():
    from backend.app.services.chain import epoch_of, epoch_start_slot, slot_in_epoch

    assert epoch_of(0) == 0
    assert epoch_of(31) == 0
    assert epoch_of(32) == 1
    assert slot_in_epoch(33) == 1
    assert epoch_start_slot(3) == 96
    with pytest.raises(ValueError):
        epoch_of(-1)


def test_slot_wall_times_follow_genesis():
    from backend.app.services.chain import ChainSpec, SlotClock, slot_wall_times

    spec = ChainSpec(genesis_time=100)
    times = slot_wall_times(1, spec)
    assert times == (112, 116, 120, 124)

    clock = SlotClock(spec)
    assert clock.slot_start_ms(2) == 124_000
    assert clock.offset_ms(2, 125_500) == 1_500
    assert clock.slot_at(99_999) == -1
    assert clock.slot_at(111_999) == 0
    assert clock.slot_at(112_000) == 1


def test_assign_duties_partitions_validators():
    from backend.app.services.chain import DEFAULT_SPEC, assign_duties

    duties = assign_duties(300, 2, SEED)
    members = [v for committee in duties.committees.values() for v in committee]
    assert sorted(members) == list(range(300))
    assert len(duties.proposers) == DEFAULT_SPEC.slots_per_epoch
    assert all(0 <= p < 300 for p in duties.proposers)
    slots = {a.attestation_slot for a in duties.assignments}
    assert min(slots) >= 64 and max(slots) < 96

    for assignment in duties.assignments:
        committee = duties.committee(assignment.attestation_slot, assignment.committee_index)
        assert assignment.validator_id in committee
        assert assignment.is_aggregator == (assignment.validator_id in duties.aggregators(
            assignment.attestation_slot, assignment.committee_index
        ))

    for slot in range(64, 96):
        proposer = duties.proposer(slot)
        assert slot in duties.assignments[proposer].proposer_slots


def test_assign_duties_is_deterministic_and_seed_sensitive():
    from backend.app.services.chain import assign_duties

    a = assign_duties(256, 0, SEED)
    b = assign_duties(256, 0, SEED)
    c = assign_duties(256, 0, hashlib.sha256(b"other").digest())
    assert a.committees == b.committees and a.proposers == b.proposers
    assert a.committees != c.committees


def test_assign_duties_rejects_bad_input():
    from backend.app.services.chain import assign_duties

    with pytest.raises(ValueError):
        assign_duties(0, 0, SEED)
    with pytest.raises(ValueError):
        assign_duties(10, 0, b"short")


def test_committees_per_slot_scale_with_validators():
    from backend.app.services.chain import ChainSpec, assign_duties, committees_per_slot

    assert committees_per_slot(100) == 1
    assert committees_per_slot(32 * 128 * 3) == 3
    assert committees_per_slot(10**7) == 64

    spec = ChainSpec(slots_per_epoch=4, target_committee_size=8)
    duties = assign_duties(64, 0, SEED, spec)
    assert len(duties.committees_at(0)) == 2


def test_sync_committee_capped_by_validator_count():
    from backend.app.services.chain import ChainSpec, sync_committee

    assert sync_committee(100, 0, SEED) == tuple(range(100))
    members = sync_committee(2000, 0, SEED, ChainSpec())
    assert len(members) == 512 and len(set(members)) == 512
    assert sync_committee(2000, 1, SEED) != members


def test_chain_view_head_target_and_justified():
    from backend.app.services.chain import ChainSpec, ChainView, Checkpoint

    spec = ChainSpec(slots_per_epoch=4)
    anchor = _root("anchor")
    r0, r2, r5 = _root("b0"), _root("b2"), _root("b5")
    view = ChainView.from_blocks(spec, anchor, {0: (r0, anchor), 2: (r2, r0), 5: (r5, r2)}, 12)

    assert view.head_at(1, 0.0) == r0
    assert view.head_at(3, 4.0) == r2
    assert view.block_root_at(-1) == anchor
    assert view.target(0) == Checkpoint(0, r0)
    assert view.target(1) == Checkpoint(1, r5)
    # Epoch 2 has no block: the checkpoint falls back to the latest earlier root.
    assert view.target(2) == Checkpoint(2, r5)
    assert view.justified(3) == Checkpoint(0, anchor)
    assert view.justified(9) == Checkpoint(1, r5)
    assert view.empty_slots() == [1, 3, 4, 6, 7, 8, 9, 10, 11]


def test_chain_view_rejects_broken_links_and_early_queries():
    from backend.app.services.chain import ChainSpec, ChainView

    anchor = _root("anchor")
    with pytest.raises(ValueError):
        ChainView.from_blocks(ChainSpec(), anchor, {1: (_root("b1"), _root("elsewhere"))}, 4)

    view = ChainView.from_blocks(ChainSpec(), anchor, {}, 4)
    with pytest.raises(ValueError):
        view.head_at(0, -0.5)
    with pytest.raises(ValueError):
        view.root_at(4)


def test_local_view_tracks_processing_times():
    from backend.app.services.chain import ChainSpec, LocalView

    anchor = _root("anchor")
    a, b = _root("a"), _root("b")
    view = LocalView(ChainSpec(), anchor, ((13_500, 1, b), (2_000, 0, a)))
    assert view.head_at(0, 1.0) == anchor
    assert view.head_at(0, 4.0) == a
    assert view.head_at(1, 1.0) == a
    assert view.head_at(1, 1.5) == b


def test_load_chain_spec_file_and_overrides(tmp_path):
    from backend.app.errors import ConfigError
    from backend.app.services.chain import load_chain_spec, parse_overrides

    path = tmp_path / "chain.cfg"
    path.write_text("# devnet\nslots_per_epoch = 8   # short epochs\nattestation_deadline_s = 3\n", encoding="utf-8")
    spec = load_chain_spec(path, parse_overrides(["genesis_time=1700000000"]))
    assert spec.slots_per_epoch == 8
    assert spec.attestation_deadline_s == 3
    assert spec.genesis_time == 1_700_000_000

    path.write_text("slots_per_epoch = 8\nbogus = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_chain_spec(path)
    with pytest.raises(ConfigError):
        parse_overrides(["no-equals"])
    with pytest.raises(ConfigError):
        load_chain_spec(tmp_path / "missing.cfg")


def test_parse_root_validates_length():
    from backend.app.services.chain import parse_root, root_hex

    root = _root("x")
    assert parse_root(root_hex(root)) == root
    with pytest.raises(ValueError):
        parse_root("0x1234")
