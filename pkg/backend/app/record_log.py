"""
Append-only record log: one JSON object per line.

Every line is an envelope ``{"id", "v", "type", "sum", ...fields}``. ``id``
increases strictly, ``v`` is the schema version and ``sum`` is a truncated
sha256 of the canonical JSON of the line without ``sum``. Lines carry no
wall-clock data, so a seeded simulation always writes the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from pydantic import BaseModel, ValidationError

from .errors import LogIntegrityError, MalformedRecordError, SchemaVersionError
from .schemas import RECORD_ADAPTER, RECORD_TYPES

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_CHECKSUM_CHARS = 16


def _canonical(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def checksum(body: dict) -> str:
    return hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()[:_CHECKSUM_CHARS]


@dataclass(frozen=True)
class LoggedRecord:
    id: int
    row: BaseModel

    @property
    def type(self) -> str:
        return self.row.type  # type: ignore[attr-defined]


@dataclass
class ReadResult:
    records: list[LoggedRecord] = field(default_factory=list)
    duplicates: int = 0
    lines: int = 0

    def counts(self) -> dict[str, int]:
        counter = Counter(r.type for r in self.records)
        return {kind: counter.get(kind, 0) for kind in RECORD_TYPES}

    def rows(self, *types: str) -> list[BaseModel]:
        wanted = set(types)
        return [r.row for r in self.records if not wanted or r.type in wanted]


class RecordLog:
    """Single-writer append log. Reads return immutable snapshots."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._last_id: Optional[int] = None

    def _scan_last_id(self) -> int:
        if not self.path.exists():
            return 0
        last = 0
        with self.path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    last = max(last, int(json.loads(line)["id"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise LogIntegrityError(f"{self.path}: unreadable line while scanning ids: {exc}") from exc
        return last

    @property
    def last_id(self) -> int:
        if self._last_id is None:
            self._last_id = self._scan_last_id()
        return self._last_id

    def _encode(self, record_id: int, row: BaseModel) -> str:
        body = {"id": record_id, "v": SCHEMA_VERSION, **row.model_dump(mode="json")}
        body["sum"] = checksum(body)
        return _canonical(body)

    def append(self, rows: Iterable[BaseModel]) -> int:
        with self._lock:
            next_id = self.last_id
            lines = []
            for row in rows:
                next_id += 1
                lines.append(self._encode(next_id, row))
            if not lines:
                return 0
            parent = self.path.parent
            if str(parent):
                os.makedirs(parent, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write("\n".join(lines) + "\n")
            self._last_id = next_id
            return len(lines)

    def append_with_ids(self, records: Iterable[LoggedRecord]) -> tuple[int, int]:
        """Append records keeping their ids; ids already present are skipped. Returns (appended, skipped)."""
        existing = {r.id for r in self.read().records} if self.path.exists() else set()
        appended = skipped = 0
        with self._lock:
            last = self.last_id
            lines = []
            for record in records:
                if record.id in existing:
                    skipped += 1
                    continue
                if record.id <= last:
                    raise LogIntegrityError(
                        f"record id {record.id} would not extend {self.path} (last id {last})"
                    )
                lines.append(self._encode(record.id, record.row))
                last = record.id
                appended += 1
            if lines:
                if str(self.path.parent):
                    os.makedirs(self.path.parent, exist_ok=True)
                with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                    fh.write("\n".join(lines) + "\n")
                self._last_id = last
        return appended, skipped

    def iter_lines(self) -> Iterator[tuple[int, dict]]:
        if not self.path.exists():
            raise MalformedRecordError(f"record log {self.path} does not exist")
        with self.path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    body = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise LogIntegrityError(f"{self.path}:{line_no}: not valid JSON ({exc.msg})") from exc
                if not isinstance(body, dict):
                    raise LogIntegrityError(f"{self.path}:{line_no}: expected an object")
                yield line_no, body

    def read(self, verify: bool = False) -> ReadResult:
        result = ReadResult()
        seen: set[int] = set()
        last_id = 0
        for line_no, body in self.iter_lines():
            result.lines += 1
            version = body.get("v")
            if version != SCHEMA_VERSION:
                raise SchemaVersionError(SCHEMA_VERSION, version if isinstance(version, int) else -1, line_no)
            try:
                record_id = int(body["id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise LogIntegrityError(f"{self.path}:{line_no}: missing or invalid id") from exc
            if verify:
                stated = body.get("sum")
                unsigned = {k: v for k, v in body.items() if k != "sum"}
                if stated != checksum(unsigned):
                    raise LogIntegrityError(f"{self.path}:{line_no}: checksum mismatch for record {record_id}")
            if record_id in seen:
                result.duplicates += 1
                continue
            if record_id <= last_id:
                raise LogIntegrityError(f"{self.path}:{line_no}: id {record_id} after {last_id} is out of order")
            fields = {k: v for k, v in body.items() if k not in ("id", "v", "sum")}
            try:
                row = RECORD_ADAPTER.validate_python(fields)
            except ValidationError as exc:
                raise MalformedRecordError(f"{self.path}:{line_no}: {exc.errors()[0]['msg']}") from exc
            seen.add(record_id)
            last_id = record_id
            result.records.append(LoggedRecord(record_id, row))
        if result.duplicates:
            logger.info("Skipped %s duplicate records in %s.", result.duplicates, self.path)
        return result

    def verify(self) -> ReadResult:
        return self.read(verify=True)
