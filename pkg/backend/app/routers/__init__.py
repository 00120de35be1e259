from . import blocks, events, node

__all__ = ["blocks", "events", "node"]
