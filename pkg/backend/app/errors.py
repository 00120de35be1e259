from __future__ import annotations

from typing import Iterable


class SlotwatchError(Exception):
    exit_code = 1


class ConfigError(SlotwatchError, ValueError):
    exit_code = 2


class DataError(SlotwatchError):
    exit_code = 3


class MalformedRecordError(DataError, ValueError):
    pass


class MalformedBlockError(DataError, ValueError):
    pass


class BlockValidationError(DataError, ValueError):
    pass


class ClockSkewError(DataError):
    def __init__(self, slot: int, offset_ms: int, tolerance_ms: int) -> None:
        super().__init__(
            f"event for slot {slot} arrived {-offset_ms} ms before the slot started "
            f"(tolerance {tolerance_ms} ms)"
        )
        self.slot = slot
        self.offset_ms = offset_ms
        self.tolerance_ms = tolerance_ms


class SchemaVersionError(DataError):
    def __init__(self, expected: int, found: int, line_no: int) -> None:
        super().__init__(f"schema version mismatch on line {line_no}: expected v{expected}, found v{found}")
        self.expected = expected
        self.found = found
        self.line_no = line_no


class InsufficientDataError(DataError):
    def __init__(self, missing: Iterable[str]) -> None:
        self.missing = sorted(set(missing))
        super().__init__("log is missing record types: " + ", ".join(self.missing))


class LogIntegrityError(DataError):
    pass


class EndpointDownError(SlotwatchError):
    def __init__(self, node_id: str, reason: str) -> None:
        super().__init__(f"endpoint {node_id} is down: {reason}")
        self.node_id = node_id
        self.reason = reason
