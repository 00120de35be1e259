"""slotwatch: consensus-layer performance toolkit."""
