import logging
from typing import Optional

from fastapi import FastAPI

from .routers import blocks, events, node as node_router
from .services.sim_node import SimNode

logger = logging.getLogger(__name__)


def create_app(node: Optional[SimNode] = None) -> FastAPI:
    """Beacon API subset for one simulated node."""
    title = f"slotwatch node {node.node_id}" if node else "slotwatch node"
    app = FastAPI(title=title, docs_url=None, redoc_url=None)
    app.state.node = node

    app.include_router(events.router)
    app.include_router(node_router.router)
    app.include_router(blocks.router)

    @app.get("/health")
    def health():
        current: Optional[SimNode] = app.state.node
        if current is None:
            return {"status": "degraded", "node": None}
        return {
            "status": "ok",
            "node": current.node_id,
            "location": current.profile.region,
            "client": current.profile.client,
            "mode": "instant" if current.instant else "realtime",
            "sim_ms": current.sim_ms(),
        }

    return app
