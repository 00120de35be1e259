from typing import Annotated, List, Literal, Optional, Union

from pydantic import BaseModel, Field, TypeAdapter, field_validator

from .services.block_scorer import AggregateSummary, BlockSummary, SourceLabel
from .services.chain import parse_root, root_hex

# --- beacon API wire payloads -------------------------------------------------
# Integers may arrive as decimal strings (standard beacon API style); unknown
# fields are ignored.


class BlockEventData(BaseModel):
    slot: int
    block: str
    execution_optimistic: bool = False


class HeadEventData(BaseModel):
    slot: int
    block: str
    state: str = ""
    epoch_transition: bool = False


class ChainReorgEventData(BaseModel):
    slot: int
    depth: int = 0
    old_head_block: str = ""
    new_head_block: str = ""
    epoch: Optional[int] = None


class SyncingData(BaseModel):
    head_slot: int
    sync_distance: int = 0
    is_syncing: bool
    is_optimistic: bool = False
    el_offline: bool = False


class SyncingResponse(BaseModel):
    data: SyncingData


class GenesisData(BaseModel):
    genesis_time: int
    genesis_validators_root: str
    genesis_fork_version: str = "0x00000000"


class GenesisResponse(BaseModel):
    data: GenesisData


class CommitteeData(BaseModel):
    index: int
    slot: int
    validators: List[int]


class CommitteesResponse(BaseModel):
    execution_optimistic: bool = False
    data: List[CommitteeData]


class AggregatePayload(BaseModel):
    attested_slot: int
    committee_index: int
    aggregation_bits: str
    source_ok: bool = True
    target_ok: bool = True
    head_ok: bool = True

    @field_validator("aggregation_bits")
    @classmethod
    def _bits(cls, value: str) -> str:
        if any(ch not in "01" for ch in value):
            raise ValueError("aggregation_bits must be a string of 0/1")
        return value


class BlockSummaryPayload(BaseModel):
    slot: int
    proposer_index: int
    parent_root: str
    root: str
    aggregates: List[AggregatePayload] = Field(default_factory=list)
    sync_participation: int = 0
    attester_slashings: int = 0
    proposer_slashings: int = 0

    @classmethod
    def from_summary(cls, block: BlockSummary) -> "BlockSummaryPayload":
        return cls(
            slot=block.slot,
            proposer_index=block.proposer_id,
            parent_root=root_hex(block.parent_root),
            root=root_hex(block.root),
            aggregates=[
                AggregatePayload(
                    attested_slot=agg.attested_slot,
                    committee_index=agg.committee_index,
                    aggregation_bits=agg.bitstring(),
                    source_ok=agg.source_ok,
                    target_ok=agg.target_ok,
                    head_ok=agg.head_ok,
                )
                for agg in block.aggregates
            ],
            sync_participation=block.sync_participation,
            attester_slashings=block.attester_slashings,
            proposer_slashings=block.proposer_slashings,
        )

    def to_summary(self, label: Optional[SourceLabel] = None) -> BlockSummary:
        return BlockSummary(
            slot=self.slot,
            proposer_id=self.proposer_index,
            parent_root=parse_root(self.parent_root),
            root=parse_root(self.root),
            aggregates=tuple(
                AggregateSummary.from_bitstring(
                    a.attested_slot,
                    a.committee_index,
                    a.aggregation_bits,
                    source_ok=a.source_ok,
                    target_ok=a.target_ok,
                    head_ok=a.head_ok,
                )
                for a in self.aggregates
            ),
            sync_participation=self.sync_participation,
            attester_slashings=self.attester_slashings,
            proposer_slashings=self.proposer_slashings,
            source_label=label,
        )


class BlockSummaryResponse(BaseModel):
    version: str = "summary"
    execution_optimistic: bool = False
    data: BlockSummaryPayload


# --- record log rows ------------------------------------------------------------


class ArrivalRow(BaseModel):
    type: Literal["arrival"] = "arrival"
    node_id: str
    location: str
    client: str
    slot: int
    offset_ms: int
    kind: Literal["block", "head", "reorg"] = "block"
    root: str = ""
    skew: bool = False


class BlockScoreRow(BaseModel):
    type: Literal["block_score"] = "block_score"
    slot: int
    node_id: str
    location: str
    client: str
    status: Literal["ok", "out_of_sync", "timeout", "protocol_error", "endpoint_down"] = "ok"
    rank: Optional[int] = None
    score: Optional[float] = None
    normalized: Optional[float] = None
    new_votes: int = 0
    new_source: int = 0
    new_target: int = 0
    new_head: int = 0
    sync_bits: int = 0
    attester_slashings: int = 0
    proposer_slashings: int = 0


class EpochPerformanceRow(BaseModel):
    type: Literal["epoch_performance"] = "epoch_performance"
    validator_id: int
    epoch: int
    node_id: str = ""
    location: str = ""
    client: str = ""
    achieved: float
    mer: float
    source_ok: bool
    target_ok: bool
    head_ok: bool
    inclusion_delay: Optional[int] = None
    proposals_assigned: int = 0
    proposals_fulfilled: int = 0
    sync_slots_assigned: int = 0
    sync_slots_signed: int = 0


class ReorgRow(BaseModel):
    type: Literal["reorg"] = "reorg"
    node_id: str
    location: str = ""
    client: str = ""
    slot: int
    depth: int = 0
    old_head: str = ""
    new_head: str = ""


class SyncSpanRow(BaseModel):
    type: Literal["sync_span"] = "sync_span"
    node_id: str
    location: str = ""
    client: str = ""
    first_slot: int
    last_slot: int
    state: Literal["synced", "out_of_sync"]


class GroundTruthRow(BaseModel):
    type: Literal["ground_truth"] = "ground_truth"
    kind: Literal["run", "canonical_block", "missed_slot", "stream_totals"]
    slot: Optional[int] = None
    node_id: str = ""
    root: str = ""
    parent_root: str = ""
    proposer_id: Optional[int] = None
    emitted: Optional[int] = None
    dropped: Optional[int] = None
    scenario: str = ""
    seed: Optional[int] = None
    duration_slots: Optional[int] = None
    validators: Optional[int] = None
    slots_per_epoch: Optional[int] = None


RecordRow = Annotated[
    Union[ArrivalRow, BlockScoreRow, EpochPerformanceRow, ReorgRow, SyncSpanRow, GroundTruthRow],
    Field(discriminator="type"),
]
RECORD_ADAPTER: TypeAdapter = TypeAdapter(RecordRow)
RECORD_TYPES = ("arrival", "block_score", "epoch_performance", "reorg", "sync_span", "ground_truth")
