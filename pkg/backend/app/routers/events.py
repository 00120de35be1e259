from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, Response
from fastapi.responses import StreamingResponse

from ..config import settings
from ..services.beacon_client import EVENT_KINDS
from ..services.sim_node import SimNode
from .deps import get_node

router = APIRouter(tags=["events"])


@router.get(settings.api.events)
def events(topics: Optional[str] = None, node: SimNode = Depends(get_node)):
    kinds = [t.strip() for t in (topics or ",".join(EVENT_KINDS)).split(",") if t.strip()]
    unknown = sorted(set(kinds) - set(EVENT_KINDS))
    if unknown:
        raise HTTPException(status_code=400, detail=f"Unknown topics: {', '.join(unknown)}")
    segment = node.next_segment()
    if segment is None:
        return Response(status_code=204)
    return StreamingResponse(
        node.stream(segment, kinds),
        media_type="text/event-stream",
        headers={"Cache-Control": "no-cache", "X-Accel-Buffering": "no"},
    )
