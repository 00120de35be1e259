from __future__ import annotations

import hashlib
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest


def _root(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


def _committees():
    from backend.app.services.block_scorer import StaticCommittees

    return StaticCommittees({(0, 0): (10, 11, 12, 13), (0, 1): (20, 21), (1, 0): (30, 31, 32)})


def _block(slot, aggregates=(), label="n1", **kwargs):
    from backend.app.services.block_scorer import BlockSummary, SourceLabel

    return BlockSummary(
        slot=slot,
        proposer_id=1,
        parent_root=_root(f"parent-{slot}"),
        root=_root(f"{label}-{slot}-{len(aggregates)}"),
        aggregates=tuple(aggregates),
        source_label=SourceLabel(label),
        **kwargs,
    )


def test_score_counts_new_flags_sync_and_slashings():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block

    agg = AggregateSummary.from_bitstring(0, 0, "1101")
    block = _block(1, [agg], sync_participation=256, attester_slashings=1)
    score = score_block(block, InclusionIndex(), committees=_committees())
    assert score.new_votes == 3
    assert (score.new_source, score.new_target, score.new_head) == (3, 3, 3)
    assert score.score == Fraction(3 * 54, 64) + Fraction(1, 64) + Fraction(1, 16)


def test_late_aggregate_earns_only_timely_flags():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block

    agg = AggregateSummary.from_bitstring(0, 1, "11")
    score = score_block(_block(3, [agg]), InclusionIndex(), committees=_committees())
    assert (score.new_source, score.new_target, score.new_head) == (2, 2, 0)
    assert score.score == Fraction(2 * 40, 64)

    stale = score_block(_block(6, [agg]), InclusionIndex(), committees=_committees())
    assert stale.new_votes == 0 and stale.score == 0


def test_index_dedups_already_included_flags():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block, update_index
    from backend.app.services.duties import Flag

    late = AggregateSummary.from_bitstring(0, 0, "1111")
    index = update_index(InclusionIndex(), _block(2, [late]), _committees())
    assert index.flags(0, 10) == Flag.SOURCE | Flag.TARGET

    again = score_block(_block(2, [late]), index, committees=_committees())
    assert again.new_votes == 0 and again.score == 0

    # A timely copy in another branch still adds the head flag only.
    timely = AggregateSummary.from_bitstring(0, 0, "1000")
    head_only = score_block(_block(1, [timely]), index, committees=_committees())
    assert head_only.new_votes == 1 and head_only.new_head == 1 and head_only.new_source == 0
    assert head_only.score == Fraction(14, 64)


def test_duplicate_aggregates_inside_one_block_count_once():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block

    a = AggregateSummary.from_bitstring(0, 0, "1100")
    b = AggregateSummary.from_bitstring(0, 0, "0110")
    score = score_block(_block(1, [a, b]), InclusionIndex(), committees=_committees())
    assert score.new_votes == 3


def test_wrong_claims_reduce_flags():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block

    wrong_head = AggregateSummary.from_bitstring(0, 1, "10", head_ok=False)
    wrong_source = AggregateSummary.from_bitstring(1, 0, "111", source_ok=False)
    score = score_block(_block(2, [wrong_head, wrong_source]), InclusionIndex(), committees=_committees())
    assert score.new_votes == 1
    assert score.score == Fraction(40, 64)


def test_malformed_blocks_are_rejected():
    from backend.app.errors import BlockValidationError, MalformedBlockError
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, score_block
    from backend.app.services.chain import ChainSpec

    with pytest.raises(MalformedBlockError):
        score_block(_block(1, [AggregateSummary.from_bitstring(0, 0, "11")]), InclusionIndex(), committees=_committees())
    with pytest.raises(MalformedBlockError):
        score_block(_block(1, [AggregateSummary.from_bitstring(0, 7, "11")]), InclusionIndex(), committees=_committees())
    with pytest.raises(MalformedBlockError):
        _block(1, [AggregateSummary.from_bitstring(1, 0, "111")])
    with pytest.raises(MalformedBlockError):
        AggregateSummary.from_bitstring(0, 0, "1x")
    with pytest.raises(MalformedBlockError):
        score_block(_block(1, [AggregateSummary.from_bitstring(0, 0, "1111")]), InclusionIndex())

    small = InclusionIndex(spec=ChainSpec(max_aggregations_per_block=1))
    two = [AggregateSummary.from_bitstring(0, 0, "1111"), AggregateSummary.from_bitstring(0, 1, "11")]
    with pytest.raises(BlockValidationError):
        score_block(_block(1, two), small, committees=_committees())
    with pytest.raises(BlockValidationError):
        score_block(_block(1, sync_participation=513), InclusionIndex())


def test_update_index_prunes_expired_epochs():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, update_index

    index = update_index(InclusionIndex(), _block(1, [AggregateSummary.from_bitstring(0, 0, "1111")]), _committees())
    assert index.epochs() == [0]
    assert len(update_index(index, _block(63)).entries) == 4
    assert len(update_index(index, _block(64)).entries) == 0


def test_score_is_monotone_under_aggregate_addition():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, StaticCommittees, score_block

    rng = np.random.default_rng(11)
    sizes = {(s, i): int(rng.integers(1, 9)) for s in range(4) for i in range(3)}
    committees = StaticCommittees(
        {key: tuple(range(100 * key[0] + 10 * key[1], 100 * key[0] + 10 * key[1] + n)) for key, n in sizes.items()}
    )

    def random_aggregate():
        slot, index = int(rng.integers(0, 4)), int(rng.integers(0, 3))
        bits = "".join("1" if rng.random() < 0.5 else "0" for _ in range(sizes[(slot, index)]))
        claims = {name: bool(rng.random() < 0.8) for name in ("source_ok", "target_ok", "head_ok")}
        return AggregateSummary.from_bitstring(slot, index, bits, **claims)

    for _ in range(1000):
        base = [random_aggregate() for _ in range(int(rng.integers(0, 5)))]
        block = _block(4, base)
        bigger = replace(block, aggregates=block.aggregates + (random_aggregate(),))
        index = InclusionIndex()
        assert score_block(bigger, index, committees=committees).score >= score_block(block, index, committees=committees).score


def test_compare_candidates_ranks_and_normalizes():
    from backend.app.services.block_scorer import AggregateSummary, InclusionIndex, compare_candidates

    full = _block(1, [AggregateSummary.from_bitstring(0, 0, "1111")], label="b-node")
    half = _block(1, [AggregateSummary.from_bitstring(0, 0, "1100")], label="a-node")
    twin = _block(1, [AggregateSummary.from_bitstring(0, 0, "0011")], label="c-node")
    ranking = compare_candidates([half, twin, full], InclusionIndex(), committees=_committees())

    assert [c.label for c in ranking.ranked] == ["b-node", "a-node", "c-node"]
    assert [c.rank for c in ranking.ranked] == [1, 2, 3]
    assert ranking.best.normalized == 1.0
    assert ranking.ranked[1].normalized == 0.5

    assert compare_candidates([], InclusionIndex()).no_candidates
    with pytest.raises(ValueError):
        compare_candidates([full, _block(2)], InclusionIndex(), committees=_committees())


def test_empty_candidates_normalize_to_zero():
    from backend.app.services.block_scorer import InclusionIndex, compare_candidates

    ranking = compare_candidates([_block(5, label="x"), _block(5, label="y")], InclusionIndex())
    assert [c.normalized for c in ranking.ranked] == [0.0, 0.0]
    assert [c.label for c in ranking.ranked] == ["x", "y"]


@pytest.mark.parametrize("preset", ["ideal.cfg", "faults.cfg", "two-regions.cfg"])
def test_canonical_blocks_rescore_to_zero_new_votes(preset):
    from pathlib import Path

    from backend.app.services.block_scorer import score_block, update_index
    from backend.app.services.scenario import load_scenario
    from backend.app.services.simulator import run

    config = load_scenario(Path(__file__).resolve().parents[2] / "presets" / preset)
    result = run(config)
    blocks = result.truth.canonical_blocks()
    assert blocks
    for block in blocks:
        before = result.index_before(block.slot)
        first = score_block(block.summary, before, committees=result.committees)
        after = update_index(before, block.summary, result.committees)
        again = score_block(block.summary, after, committees=result.committees)
        assert again.new_votes == 0
        assert again.score <= first.score


def test_packing_trims_votes_already_taken():
    from backend.app.services.block_scorer import (
        AggregateSummary,
        InclusionIndex,
        pack_aggregates,
        score_block,
        update_index,
    )

    committees = _committees()
    index = update_index(InclusionIndex(), _block(1, [AggregateSummary.from_bitstring(0, 1, "10")]), committees)
    pool = [
        AggregateSummary.from_bitstring(0, 0, "1100"),
        AggregateSummary.from_bitstring(0, 0, "0111"),
        AggregateSummary.from_bitstring(0, 0, "0110"),
        AggregateSummary.from_bitstring(0, 1, "11"),
    ]
    packed = pack_aggregates(pool, 1, index, committees)
    assert [(position, agg.bitstring()) for position, agg in packed] == [(1, "0111"), (0, "1000"), (3, "01")]

    block = _block(1, [agg for _, agg in packed])
    score = score_block(block, index, committees=committees)
    assert score.new_votes == 5
    assert score.score == Fraction(5 * 54, 64)
    after = update_index(index, block, committees)
    assert pack_aggregates(pool, 1, after, committees) == []

    assert [position for position, _ in pack_aggregates(pool, 1, index, committees, limit=1)] == [1]
