"""
Deterministic discrete-event simulation of a multi-region beacon network.

A single heap drives every node. Times are integer milliseconds since
genesis. Events at the same instant order as (time, rank, node, message id),
with deliveries ranked before slot duties so a message processed exactly at a
deadline still counts.

Latency samples are ``shift + median * exp(sigma * z)``. The standard normals
``z`` come from one generator per slot that always draws a full
(kind, source, destination) grid, so the draw order depends only on the
scenario's shape: raising a region's median never shortens a sample.
"""
from __future__ import annotations

import bisect
import hashlib
import heapq
import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Final, Literal, Mapping, NamedTuple, Optional

import numpy as np

from ..config import settings
from ..errors import SlotwatchError
from .block_scorer import (
    AggregateSummary,
    BlockSummary,
    InclusionIndex,
    SourceLabel,
    pack_aggregates,
    update_index,
)
from .chain import (
    ChainView,
    Checkpoint,
    CommitteeCache,
    EpochDuties,
    LocalView,
    epoch_of,
    root_hex,
)
from .duties import (
    DEFAULT_WEIGHTS,
    MISSED,
    TARGET_WINDOW,
    AttestationRecord,
    EpochPerformance,
    RewardWeights,
    epoch_performance,
    evaluate_attestation,
    timely_flags,
)
from .scenario import FaultSpec, NodeProfile, SimConfig
from .telemetry import ReorgEvent, is_out_of_sync

logger = logging.getLogger(__name__)

MessageKind = Literal["block", "votes", "aggregate", "sync"]
_KIND_INDEX: Final = {"block": 0, "votes": 1, "aggregate": 2, "sync": 3}
_DELIVERY: Final = 0
_DUTY: Final = 1


@dataclass(frozen=True)
class Claims:
    source: Checkpoint
    target: Checkpoint
    head: bytes


@dataclass(frozen=True)
class Vote:
    validator_id: int
    slot: int
    committee_index: int
    claims: Claims


@dataclass(frozen=True)
class PoolAggregate:
    agg_id: int
    slot: int
    committee_index: int
    claims: Claims
    voters: frozenset[int]
    node_id: str


@dataclass(frozen=True)
class SimBlock:
    slot: int
    root: bytes
    parent_root: bytes
    proposer_id: int
    node_id: str
    published_ms: int
    summary: BlockSummary
    aggregates: tuple[PoolAggregate, ...] = ()
    sync_signers: frozenset[int] = frozenset()


class Delivery(NamedTuple):
    message_id: int
    kind: str
    slot: int
    source: str
    destination: str
    sent_ms: int
    received_ms: int
    processed_ms: int


class NodeEvent(NamedTuple):
    kind: str
    slot: int
    root: bytes
    sim_ms: int
    local_ms: int
    dropped: bool
    depth: int = 0
    old_head: bytes = b""
    new_head: bytes = b""


@dataclass(frozen=True)
class VoteOutcome:
    validator_id: int
    slot: int
    node_id: str
    claims: Claims
    inclusion_slot: Optional[int]

    @property
    def expired(self) -> bool:
        return self.inclusion_slot is None


@dataclass(frozen=True)
class GroundTruth:
    anchor_root: bytes
    canonical: ChainView
    blocks: Mapping[bytes, SimBlock] = field(hash=False)
    local_views: Mapping[str, LocalView] = field(hash=False)
    deliveries: tuple[Delivery, ...] = ()
    votes: tuple[VoteOutcome, ...] = ()
    performances: tuple[EpochPerformance, ...] = ()
    reorgs: tuple[ReorgEvent, ...] = ()
    sync_states: Mapping[str, tuple[bool, ...]] = field(default_factory=dict, hash=False)
    missed_slots: tuple[int, ...] = ()

    def canonical_blocks(self) -> list[SimBlock]:
        return [self.blocks[root] for root in self.canonical.roots if root is not None]


class CandidateUnavailable(SlotwatchError):
    def __init__(self, node_id: str, slot: int, reason: str) -> None:
        super().__init__(f"{node_id} cannot produce a block for slot {slot}: {reason}")
        self.node_id = node_id
        self.slot = slot
        self.reason = reason


def _digest(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def _u64(value: int) -> bytes:
    return value.to_bytes(8, "little", signed=False)


class _Node:
    def __init__(self, profile: NodeProfile, order: int, config: SimConfig) -> None:
        slot_ms = config.spec.slot_ms
        self.profile = profile
        self.order = order
        self.node_id = profile.node_id
        self.head: Optional[SimBlock] = None
        self.processed: list[tuple[int, int, bytes]] = []
        self.head_trace: list[tuple[int, int, bytes]] = []
        self.events: list[NodeEvent] = []
        self.reorgs: list[ReorgEvent] = []
        self.pool: dict[int, list[tuple[int, PoolAggregate]]] = defaultdict(list)
        self.sync_inbox: dict[int, list[tuple[int, frozenset[int]]]] = defaultdict(list)
        self.vote_inbox: dict[tuple[int, int], list[Vote]] = defaultdict(list)
        self.sync_flags: list[bool] = []
        # (slot, head root) held at the latest vote deadline the node was up for.
        self.voted: Optional[tuple[int, bytes]] = None

        def windows(kind: str) -> list[tuple[int, int, FaultSpec]]:
            return [
                (f.first_slot * slot_ms, (f.last_slot + 1) * slot_ms, f) for f in config.faults_for(profile.node_id, kind)
            ]

        self.down = windows("node_down")
        self.skews = windows("clock_skew")
        self.drops = windows("stream_drop")
        self.late = {s: f.delay_ms for f in config.faults_for(profile.node_id, "late_publish") for s in range(f.first_slot, f.last_slot + 1)}
        self.slow = {s: f.delay_ms for f in config.faults_for(profile.node_id, "slow_response") for s in range(f.first_slot, f.last_slot + 1)}

    @property
    def head_slot(self) -> int:
        return self.head.slot if self.head else -1

    def down_until(self, at_ms: int) -> Optional[int]:
        for start, end, _ in self.down:
            if start <= at_ms < end:
                return end
        return None

    def is_down(self, at_ms: int) -> bool:
        return self.down_until(at_ms) is not None

    def local_ms(self, at_ms: int) -> int:
        for start, end, fault in self.skews:
            if start <= at_ms < end:
                return at_ms + fault.offset_ms
        return at_ms

    def is_dropped(self, at_ms: int) -> bool:
        return any(start <= at_ms < end for start, end, _ in self.drops)


class _Engine:
    def __init__(self, config: SimConfig, weights: RewardWeights, base: int) -> None:
        self.config = config
        self.spec = config.spec
        self.weights = weights
        self.base = base
        self.nodes = [_Node(p, i, config) for i, p in enumerate(config.profiles())]
        self.by_id = {n.node_id: n for n in self.nodes}
        self.regions = config.region_map
        self._owner: list[int] = []
        for node in self.nodes:
            self._owner.extend([node.order] * node.profile.validators)

        seed8 = _u64(config.seed)
        self.seed8 = seed8
        self.committees = CommitteeCache(len(self._owner), _digest(b"duties", seed8), self.spec)
        self.anchor = _digest(b"anchor", seed8)
        self.blocks: dict[bytes, SimBlock] = {}
        self.index_of: dict[bytes, InclusionIndex] = {self.anchor: InclusionIndex(self.spec)}
        self.published: list[tuple[int, int]] = []
        self.latest_published_slot = -1
        self.reference_slot: dict[int, int] = {}
        self.missed: list[int] = []
        self.votes: dict[tuple[int, int], tuple[str, Vote]] = {}
        self.deliveries: list[Delivery] = []

        self._queue: list[tuple[Any, ...]] = []
        self._seq = itertools.count()
        self._msg = itertools.count(1)
        self._agg_ids = itertools.count(1)
        self._draws: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._claims_cache: dict[tuple[bytes, int], Claims] = {}
        self._target_cache: dict[tuple[bytes, int], tuple[Checkpoint, bool]] = {}
        self._ancestor_cache: dict[tuple[bytes, int], bytes] = {}
        self._sync_owned: dict[int, dict[int, frozenset[int]]] = {}

    # --- plumbing -----------------------------------------------------------

    def _push(self, at_ms: int, rank: int, order: int, msg: int, fn: Callable[..., None], *args: Any) -> None:
        heapq.heappush(self._queue, (at_ms, rank, order, msg, next(self._seq), fn, args))

    def _slot_draws(self, slot: int) -> tuple[np.ndarray, np.ndarray]:
        draws = self._draws.get(slot)
        if draws is None:
            rng = np.random.default_rng([self.config.seed, slot])
            n = len(self.nodes)
            draws = (rng.standard_normal((4, n, n)), rng.random((4, n, n)))
            self._draws[slot] = draws
            for stale in [s for s in self._draws if s < slot - 2 * self.spec.slots_per_epoch]:
                del self._draws[stale]
        return draws

    def _send(self, kind: MessageKind, slot: int, src: _Node, dst: _Node, payload: Any, sent_ms: int) -> None:
        msg = next(self._msg)
        if src is dst:
            latency = cost = 0
        else:
            z, u = self._slot_draws(slot)
            k = _KIND_INDEX[kind]
            model = self.regions[dst.profile.region].latency_from(src.profile.region)
            latency = int(round(model.shift_ms + model.median_ms * float(np.exp(model.sigma * z[k, src.order, dst.order]))))
            profile = dst.profile
            cost = int(round((profile.processing_ms + profile.jitter_ms * float(u[k, src.order, dst.order])) * profile.load_factor))
        received = sent_ms + latency
        start = dst.down_until(received) or received
        processed = start + cost
        self.deliveries.append(Delivery(msg, kind, slot, src.node_id, dst.node_id, sent_ms, received, processed))
        self._push(processed, _DELIVERY, dst.order, msg, self._deliver, kind, dst, payload)

    def _deliver(self, at_ms: int, kind: str, dst: _Node, payload: Any) -> None:
        if kind == "block":
            self._process_block(dst, payload, at_ms)
        elif kind == "votes":
            slot, votes = payload
            if at_ms <= slot * self.spec.slot_ms + self.spec.aggregation_deadline_ms:
                for vote in votes:
                    dst.vote_inbox[(vote.slot, vote.committee_index)].append(vote)
        elif kind == "aggregate":
            for agg in payload:
                dst.pool[agg.slot].append((at_ms, agg))
        elif kind == "sync":
            slot, signers = payload
            dst.sync_inbox[slot].append((at_ms, signers))

    def _duties(self, slot: int) -> EpochDuties:
        return self.committees.duties(epoch_of(slot, self.spec))

    # --- chain helpers --------------------------------------------------------

    def _ancestor_at(self, root: bytes, slot: int) -> bytes:
        key = (root, slot)
        cached = self._ancestor_cache.get(key)
        if cached is None:
            cursor = root
            while cursor in self.blocks and self.blocks[cursor].slot > slot:
                cursor = self.blocks[cursor].parent_root
            cached = self._ancestor_cache[key] = cursor
        return cached

    def _target(self, root: bytes, epoch: int) -> tuple[Checkpoint, bool]:
        """Epoch checkpoint on the chain ending at ``root`` and whether the epoch has a block on it."""
        key = (root, epoch)
        cached = self._target_cache.get(key)
        if cached is not None:
            return cached
        start = epoch * self.spec.slots_per_epoch
        end = start + self.spec.slots_per_epoch
        found: Optional[bytes] = None
        cursor = root
        while cursor in self.blocks and self.blocks[cursor].slot >= start:
            if self.blocks[cursor].slot < end:
                found = cursor
            cursor = self.blocks[cursor].parent_root
        result = (Checkpoint(epoch, found), True) if found is not None else (Checkpoint(epoch, cursor), False)
        self._target_cache[key] = result
        return result

    def _justified(self, root: bytes, slot: int) -> Checkpoint:
        epoch = epoch_of(slot, self.spec)
        if epoch == 0:
            return Checkpoint(0, self.anchor)
        return self._target(root, epoch - 1)[0]

    def _claims(self, head_root: bytes, slot: int) -> Claims:
        key = (head_root, slot)
        claims = self._claims_cache.get(key)
        if claims is None:
            claims = Claims(
                source=self._justified(head_root, slot),
                target=self._target(head_root, epoch_of(slot, self.spec))[0],
                head=head_root,
            )
            self._claims_cache[key] = claims
        return claims

    def _is_ancestor(self, root: bytes, block: SimBlock) -> bool:
        floor = self.blocks[root].slot if root in self.blocks else -1
        cursor = block.parent_root
        while cursor in self.blocks:
            if cursor == root:
                return True
            if self.blocks[cursor].slot < floor:
                return False
            cursor = self.blocks[cursor].parent_root
        return cursor == root

    # --- block building -------------------------------------------------------

    def _check_claims(self, agg: PoolAggregate, parent_root: bytes, block_slot: int) -> tuple[bool, bool, bool]:
        attested_epoch = epoch_of(agg.slot, self.spec)
        source_ok = agg.claims.source == self._justified(parent_root, agg.slot)
        expected_target, in_epoch = self._target(parent_root, attested_epoch)
        if not in_epoch and epoch_of(block_slot, self.spec) == attested_epoch:
            # The block being built becomes the epoch's first block, so no earlier root can match.
            target_ok = False
        else:
            target_ok = agg.claims.target == expected_target
        head_ok = agg.claims.head == self._ancestor_at(parent_root, agg.slot)
        return source_ok, target_ok, head_ok

    def _build(self, node: _Node, slot: int, at_ms: int, parent_root: bytes, root: bytes) -> SimBlock:
        parent_index = self.index_of[parent_root]
        pooled: list[tuple[PoolAggregate, tuple[int, ...], AggregateSummary]] = []
        for attested in range(slot - 1, max(0, slot - TARGET_WINDOW) - 1, -1):
            if not timely_flags(True, True, True, slot - attested).source_ok:
                continue
            pool = sorted(node.pool.get(attested, ()), key=lambda item: (item[1].committee_index, item[1].agg_id))
            for processed_ms, agg in pool:
                if processed_ms > at_ms:
                    continue
                members = self.committees.committee(agg.slot, agg.committee_index)
                source_ok, target_ok, head_ok = self._check_claims(agg, parent_root, slot)
                summary = AggregateSummary(
                    attested_slot=agg.slot,
                    committee_index=agg.committee_index,
                    bits=tuple(m in agg.voters for m in members),
                    source_ok=source_ok,
                    target_ok=target_ok,
                    head_ok=head_ok,
                )
                pooled.append((agg, members, summary))
        packed = pack_aggregates(
            [summary for _, _, summary in pooled],
            slot,
            parent_index,
            self.committees,
            self.weights,
            self.spec.max_aggregations_per_block,
        )
        chosen: list[tuple[PoolAggregate, AggregateSummary]] = []
        for position, summary in packed:
            agg, members, _ = pooled[position]
            voters = frozenset(m for m, bit in zip(members, summary.bits) if bit)
            chosen.append((replace(agg, voters=voters), summary))

        signers: set[int] = set()
        for processed_ms, batch in node.sync_inbox.get(slot - 1, ()):
            if processed_ms <= at_ms:
                signers |= batch

        proposer = self._duties(slot).proposer(slot, self.spec)
        summary = BlockSummary(
            slot=slot,
            proposer_id=proposer,
            parent_root=parent_root,
            root=root,
            aggregates=tuple(s for _, s in chosen),
            sync_participation=len(signers),
            source_label=SourceLabel(node.node_id, node.profile.region, node.profile.client),
        )
        return SimBlock(
            slot=slot,
            root=root,
            parent_root=parent_root,
            proposer_id=proposer,
            node_id=node.node_id,
            published_ms=at_ms,
            summary=summary,
            aggregates=tuple(agg for agg, _ in chosen),
            sync_signers=frozenset(signers),
        )

    # --- duties ---------------------------------------------------------------

    def _propose(self, at_ms: int, slot: int) -> None:
        self.reference_slot[slot] = self.latest_published_slot
        proposer = self._duties(slot).proposer(slot, self.spec)
        node = self.nodes[self._owner[proposer]]
        if node.is_down(at_ms) or is_out_of_sync(node.head_slot, self.latest_published_slot):
            self.missed.append(slot)
            logger.debug("Slot %s missed: proposer %s on %s is unavailable.", slot, proposer, node.node_id)
            return
        parent_root = node.head.root if node.head else self.anchor
        root = _digest(b"block", self.seed8, _u64(slot), _u64(proposer))
        block = self._build(node, slot, at_ms, parent_root, root)
        publish_ms = at_ms + node.late.get(slot, 0)
        if publish_ms != at_ms:
            block = replace(block, published_ms=publish_ms)
        self.blocks[root] = block
        self.index_of[root] = update_index(self.index_of[parent_root], block.summary, self.committees)
        self.published.append((publish_ms, slot))
        self.latest_published_slot = max(self.latest_published_slot, slot)
        for dst in self.nodes:
            self._send("block", slot, node, dst, block, publish_ms)

    def _attesters(self, slot: int) -> dict[int, list[tuple[int, int]]]:
        by_node: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for index, members in self._duties(slot).committees_at(slot):
            for validator in members:
                by_node[self._owner[validator]].append((index, validator))
        return by_node

    def _sync_members_by_node(self, slot: int) -> dict[int, frozenset[int]]:
        period = epoch_of(slot, self.spec) // self.spec.sync_committee_period_epochs
        cached = self._sync_owned.get(period)
        if cached is None:
            owned: dict[int, set[int]] = defaultdict(set)
            for validator in self._duties(slot).sync_members:
                owned[self._owner[validator]].add(validator)
            cached = {order: frozenset(members) for order, members in owned.items()}
            self._sync_owned[period] = cached
        return cached

    def _attest(self, at_ms: int, slot: int) -> None:
        duties = self._duties(slot)
        attesters = self._attesters(slot)
        sync_owned = self._sync_members_by_node(slot)
        aggregator_nodes = {
            index: sorted({self._owner[v] for v in duties.aggregators(slot, index, self.spec)})
            for index, _ in duties.committees_at(slot)
        }
        for node in self.nodes:
            down = node.is_down(at_ms)
            node.sync_flags.append(is_out_of_sync(node.head_slot, self.latest_published_slot, syncing=down))
            if down:
                continue
            head_root = node.head.root if node.head else self.anchor
            node.voted = (slot, head_root)
            claims = self._claims(head_root, slot)
            bundles: dict[int, list[Vote]] = defaultdict(list)
            for index, validator in attesters.get(node.order, ()):
                vote = Vote(validator, slot, index, claims)
                self.votes[(validator, slot)] = (node.node_id, vote)
                for target in aggregator_nodes.get(index, ()):
                    bundles[target].append(vote)
            for target in sorted(bundles):
                self._send("votes", slot, node, self.nodes[target], (slot, tuple(bundles[target])), at_ms)
            signers = sync_owned.get(node.order)
            if signers:
                for dst in self.nodes:
                    self._send("sync", slot, node, dst, (slot, signers), at_ms)

    def _aggregate(self, at_ms: int, slot: int) -> None:
        duties = self._duties(slot)
        for node in self.nodes:
            if node.is_down(at_ms):
                continue
            produced: list[PoolAggregate] = []
            for index, _ in duties.committees_at(slot):
                votes = node.vote_inbox.pop((slot, index), None)
                if not votes:
                    continue
                groups: dict[Claims, list[int]] = {}
                for vote in votes:
                    groups.setdefault(vote.claims, []).append(vote.validator_id)
                for claims, voters in groups.items():
                    produced.append(PoolAggregate(next(self._agg_ids), slot, index, claims, frozenset(voters), node.node_id))
            if produced:
                batch = tuple(produced)
                for dst in self.nodes:
                    self._send("aggregate", slot, node, dst, batch, at_ms)

    # --- block processing ---------------------------------------------------------

    def _dropped(self, old: Optional[SimBlock], new: SimBlock) -> int:
        count = 0
        cursor = old
        while cursor is not None and not self._is_ancestor(cursor.root, new):
            count += 1
            cursor = self.blocks.get(cursor.parent_root)
        return count

    def _process_block(self, node: _Node, block: SimBlock, at_ms: int) -> None:
        local = node.local_ms(at_ms)
        dropped_stream = node.is_dropped(at_ms)
        node.processed.append((at_ms, block.slot, block.root))
        node.events.append(NodeEvent("block", block.slot, block.root, at_ms, local, dropped_stream))
        old = node.head
        if old is not None and block.slot <= old.slot:
            return
        node.head = block
        node.head_trace.append((at_ms, block.slot, block.root))
        node.events.append(NodeEvent("head", block.slot, block.root, at_ms, local, dropped_stream))
        if block.node_id == node.node_id:
            return
        late = at_ms > block.slot * self.spec.slot_ms + self.spec.attestation_deadline_ms
        old_root = old.root if old else self.anchor
        voted = node.voted
        if late and voted is not None and voted[0] >= block.slot and voted[1] == old_root:
            # A head voted on for an empty slot counts as one displaced block.
            depth = self._dropped(old, block) or 1
            node.reorgs.append(
                ReorgEvent(
                    node_id=node.node_id,
                    slot=block.slot,
                    depth=depth,
                    location=node.profile.region,
                    client=node.profile.client,
                    old_head=root_hex(old_root),
                    new_head=root_hex(block.root),
                )
            )
            node.events.append(
                NodeEvent("chain_reorg", block.slot, block.root, at_ms, local, dropped_stream, depth, old_root, block.root)
            )

    # --- run --------------------------------------------------------------------------

    def execute(self) -> None:
        spec = self.spec
        duration = self.config.duration_slots
        for slot in range(duration + 1):
            start = slot * spec.slot_ms
            self._push(start, _DUTY, -1, 0, self._propose, slot)
            if slot < duration:
                self._push(start + spec.attestation_deadline_ms, _DUTY, -1, 0, self._attest, slot)
                self._push(start + spec.aggregation_deadline_ms, _DUTY, -1, 0, self._aggregate, slot)
        while self._queue:
            at_ms, _, _, _, _, fn, args = heapq.heappop(self._queue)
            fn(at_ms, *args)

    def _canonical(self) -> ChainView:
        num_slots = self.config.duration_slots + 1
        entries: dict[int, tuple[bytes, bytes]] = {}
        if self.blocks:
            tip = max(self.blocks.values(), key=lambda b: b.slot)
            cursor: Optional[SimBlock] = tip
            while cursor is not None:
                entries[cursor.slot] = (cursor.root, cursor.parent_root)
                cursor = self.blocks.get(cursor.parent_root)
        return ChainView.from_blocks(self.spec, self.anchor, entries, num_slots)

    def _performances(self, view: ChainView) -> tuple[list[EpochPerformance], list[VoteOutcome]]:
        spe = self.spec.slots_per_epoch
        inclusion: dict[tuple[int, int], int] = {}
        signed: dict[tuple[int, int], int] = defaultdict(int)
        for root in view.roots:
            if root is None:
                continue
            block = self.blocks[root]
            for agg in block.aggregates:
                for voter in agg.voters:
                    key = (voter, agg.slot)
                    if key in inclusion:
                        raise SlotwatchError(
                            f"vote of validator {voter} for slot {agg.slot} is included at slots "
                            f"{inclusion[key]} and {block.slot}"
                        )
                    inclusion[key] = block.slot
            if block.slot > 0:
                signed_epoch = epoch_of(block.slot - 1, self.spec)
                for validator in block.sync_signers:
                    signed[(validator, signed_epoch)] += 1

        outcomes = [
            VoteOutcome(v, s, node_id, vote.claims, inclusion.get((v, s)))
            for (v, s), (node_id, vote) in sorted(self.votes.items())
        ]
        performances: list[EpochPerformance] = []
        for epoch in range(self.config.duration_slots // spe):
            duties = self.committees.duties(epoch)
            for assignment in duties.assignments:
                validator = assignment.validator_id
                node = self.nodes[self._owner[validator]]
                recorded = self.votes.get((validator, assignment.attestation_slot))
                if recorded is None:
                    flags = MISSED
                else:
                    claims = recorded[1].claims
                    flags = evaluate_attestation(
                        AttestationRecord(
                            validator_id=validator,
                            attested_slot=assignment.attestation_slot,
                            claimed_source=claims.source,
                            claimed_target=claims.target,
                            claimed_head=claims.head,
                            inclusion_slot=inclusion.get((validator, assignment.attestation_slot)),
                        ),
                        view,
                    )
                fulfilled = sum(
                    1
                    for s in assignment.proposer_slots
                    if view.roots[s] is not None and self.blocks[view.roots[s]].proposer_id == validator  # type: ignore[index]
                )
                performances.append(
                    epoch_performance(
                        assignment,
                        flags,
                        sync_slots_signed=min(spe, signed.get((validator, epoch), 0)),
                        proposals_fulfilled=fulfilled,
                        weights=self.weights,
                        base=self.base,
                        spec=self.spec,
                        location=node.profile.region,
                        client=node.profile.client,
                        node_id=node.node_id,
                    )
                )
        return performances, outcomes

    def truth(self) -> GroundTruth:
        view = self._canonical()
        performances, outcomes = self._performances(view)
        reorgs = sorted((r for n in self.nodes for r in n.reorgs), key=lambda r: (r.slot, r.node_id))
        return GroundTruth(
            anchor_root=self.anchor,
            canonical=view,
            blocks=dict(self.blocks),
            local_views={n.node_id: LocalView(self.spec, self.anchor, tuple(n.processed)) for n in self.nodes},
            deliveries=tuple(self.deliveries),
            votes=tuple(outcomes),
            performances=tuple(performances),
            reorgs=tuple(reorgs),
            sync_states={n.node_id: tuple(n.sync_flags) for n in self.nodes},
            missed_slots=tuple(self.missed),
        )


class SimulationResult:
    """Output of one run: ground truth, per-node event streams and a block builder for candidates."""

    def __init__(self, config: SimConfig, engine: _Engine, truth: GroundTruth) -> None:
        self.config = config
        self.truth = truth
        self._engine = engine
        self._published = sorted(engine.published)
        self._published_ms = [ms for ms, _ in self._published]

    @property
    def spec(self):
        return self.config.spec

    @property
    def committees(self) -> CommitteeCache:
        return self._engine.committees

    @property
    def anchor_root(self) -> bytes:
        return self.truth.anchor_root

    def profile(self, node_id: str) -> NodeProfile:
        return self._node(node_id).profile

    def profiles(self) -> list[NodeProfile]:
        return [n.profile for n in self._engine.nodes]

    def _node(self, node_id: str) -> _Node:
        try:
            return self._engine.by_id[node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def events(self, node_id: str, include_dropped: bool = False) -> list[NodeEvent]:
        events = self._node(node_id).events
        return list(events) if include_dropped else [e for e in events if not e.dropped]

    def stream_segments(self, node_id: str) -> list[list[NodeEvent]]:
        """Served event stream split at every stream_drop window; dropped events are omitted."""
        node = self._node(node_id)
        segments: list[list[NodeEvent]] = [[]]
        windows = sorted((start, end) for start, end, _ in node.drops)
        boundary = 0
        for event in node.events:
            while boundary < len(windows) and event.sim_ms >= windows[boundary][0]:
                segments.append([])
                boundary += 1
            if not event.dropped:
                segments[-1].append(event)
        while boundary < len(windows):
            segments.append([])
            boundary += 1
        return segments

    def is_down(self, node_id: str, at_ms: int) -> bool:
        return self._node(node_id).is_down(at_ms)

    def reference_slot_at(self, at_ms: int) -> int:
        idx = bisect.bisect_right(self._published_ms, at_ms)
        return max((slot for _, slot in self._published[:idx]), default=-1)

    def head_at_ms(self, node_id: str, at_ms: int, before_slot: Optional[int] = None) -> tuple[int, bytes]:
        trace = self._node(node_id).head_trace
        idx = bisect.bisect_right(trace, (at_ms, float("inf"))) - 1
        while idx >= 0 and before_slot is not None and trace[idx][1] >= before_slot:
            idx -= 1
        if idx < 0:
            return -1, self.truth.anchor_root
        return trace[idx][1], trace[idx][2]

    def sync_status(self, node_id: str, at_ms: int) -> tuple[bool, int]:
        head_slot, _ = self.head_at_ms(node_id, at_ms)
        syncing = self.is_down(node_id, at_ms) or is_out_of_sync(head_slot, self.reference_slot_at(at_ms))
        return syncing, head_slot

    def response_delay_ms(self, node_id: str, slot: int) -> int:
        return self._node(node_id).slow.get(slot, 0)

    def build_candidate(self, node_id: str, slot: int) -> BlockSummary:
        node = self._node(node_id)
        engine = self._engine
        start = slot * engine.spec.slot_ms
        if node.is_down(start):
            raise CandidateUnavailable(node_id, slot, "out_of_sync")
        head_slot, head_root = self.head_at_ms(node_id, start, before_slot=slot)
        reference = engine.reference_slot.get(slot, self.reference_slot_at(start - 1))
        if is_out_of_sync(head_slot, reference):
            raise CandidateUnavailable(node_id, slot, "out_of_sync")
        root = _digest(b"candidate", engine.seed8, _u64(slot), node_id.encode())
        return engine._build(node, slot, start, head_root, root).summary

    def index_before(self, slot: int) -> InclusionIndex:
        """Inclusion index of the canonical chain up to ``slot - 1``."""
        root = self.truth.canonical.block_root_at(slot - 1)
        return self._engine.index_of[root]

    def canonical_block(self, slot: int) -> Optional[SimBlock]:
        root = self.truth.canonical.root_at(slot)
        return self.truth.blocks[root] if root is not None else None


def run(
    config: SimConfig,
    *,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    base: Optional[int] = None,
) -> SimulationResult:
    engine = _Engine(config, weights, settings.base_reward if base is None else base)
    engine.execute()
    truth = engine.truth()
    logger.info(
        "Simulated %s: %s slots, %s blocks (%s canonical), %s reorgs, %s deliveries.",
        config.name,
        config.duration_slots,
        len(truth.blocks),
        sum(1 for r in truth.canonical.roots if r is not None),
        len(truth.reorgs),
        len(truth.deliveries),
    )
    return SimulationResult(config, engine, truth)


def emergent_reorgs(result: SimulationResult) -> list[ReorgEvent]:
    """Reorgs the nodes saw on their own, ordered by (slot, node)."""
    return list(result.truth.reorgs)
