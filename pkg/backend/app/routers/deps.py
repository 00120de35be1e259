from fastapi import HTTPException, Request

from ..services.sim_node import SimNode


def get_node(request: Request) -> SimNode:
    node = getattr(request.app.state, "node", None)
    if node is None:
        raise HTTPException(status_code=503, detail="No simulated node attached")
    return node
