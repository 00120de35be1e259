from fastapi import APIRouter, Depends

from ..config import settings
from ..schemas import GenesisResponse, SyncingResponse
from ..services.sim_node import SimNode
from .deps import get_node

router = APIRouter(tags=["node"])


@router.get(settings.api.syncing, response_model=SyncingResponse)
def syncing(node: SimNode = Depends(get_node)):
    return node.syncing()


@router.get(settings.api.genesis, response_model=GenesisResponse)
def genesis(node: SimNode = Depends(get_node)):
    return node.genesis()
