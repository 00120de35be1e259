import logging
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException

from ..config import settings
from ..schemas import BlockSummaryResponse, CommitteesResponse
from ..services.sim_node import NodeSyncing, SimNode, SlotOutOfRange
from .deps import get_node

router = APIRouter(tags=["blocks"])
logger = logging.getLogger(__name__)


def _require_summary(summary: bool) -> None:
    # Simulated nodes only hold block summaries.
    if not summary:
        raise HTTPException(status_code=400, detail="Only summary=true responses are served")


@router.get(settings.api.produce_block + "/{slot}", response_model=BlockSummaryResponse)
def produce_block(slot: int, summary: bool = True, node: SimNode = Depends(get_node)):
    _require_summary(summary)
    try:
        return node.produce_block(slot)
    except SlotOutOfRange as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    except NodeSyncing as exc:
        logger.info("Candidate request on syncing node: %s", exc)
        raise HTTPException(status_code=503, detail="Node is syncing")


@router.get(settings.api.beacon_block + "/{slot}", response_model=BlockSummaryResponse)
def beacon_block(slot: int, summary: bool = True, node: SimNode = Depends(get_node)):
    _require_summary(summary)
    try:
        block = node.block(slot)
    except SlotOutOfRange as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    if block is None:
        raise HTTPException(status_code=404, detail=f"No block at slot {slot}")
    return block


@router.get(settings.api.committees, response_model=CommitteesResponse)
def committees(epoch: Optional[int] = None, node: SimNode = Depends(get_node)):
    try:
        return node.committees(epoch)
    except SlotOutOfRange as exc:
        raise HTTPException(status_code=400, detail=str(exc))
