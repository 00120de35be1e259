"""
Protocol constants, slot/epoch arithmetic, duty assignment and chain views.

Everything here is immutable once built and safe to share between threads.
Times inside the simulator are integer milliseconds relative to genesis;
wall-clock helpers add ``genesis_time``.
"""
from __future__ import annotations

import bisect
import configparser
import hashlib
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Final, Iterable, Mapping, NamedTuple, Optional, Protocol

import numpy as np

from ..errors import ConfigError

ROOT_BYTES: Final = 32
# Explicit marker for a slot without a block.
EMPTY_SLOT: Final = None


@dataclass(frozen=True)
class ChainSpec:
    seconds_per_slot: int = 12
    slots_per_epoch: int = 32
    attestation_deadline_s: int = 4
    aggregation_deadline_s: int = 8
    max_aggregations_per_block: int = 128
    max_committees_per_slot: int = 64
    aggregators_per_committee: int = 16
    sync_committee_size: int = 512
    sync_committee_period_epochs: int = 256
    target_committee_size: int = 128
    genesis_time: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if f.name == "genesis_time":
                if value < 0:
                    raise ConfigError("genesis_time must be non-negative")
            elif value <= 0:
                raise ConfigError(f"{f.name} must be strictly positive, got {value}")
        if not (0 < self.attestation_deadline_s < self.aggregation_deadline_s < self.seconds_per_slot):
            raise ConfigError(
                "slot phases must satisfy 0 < attestation_deadline_s < aggregation_deadline_s < seconds_per_slot"
            )

    @property
    def slot_ms(self) -> int:
        return self.seconds_per_slot * 1000

    @property
    def attestation_deadline_ms(self) -> int:
        return self.attestation_deadline_s * 1000

    @property
    def aggregation_deadline_ms(self) -> int:
        return self.aggregation_deadline_s * 1000

    @property
    def slots_per_sync_period(self) -> int:
        return self.sync_committee_period_epochs * self.slots_per_epoch


DEFAULT_SPEC: Final = ChainSpec()


class SlotTimes(NamedTuple):
    start: int
    attestation_deadline: int
    aggregation_deadline: int
    end: int


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    root: bytes

    def __post_init__(self) -> None:
        if not self.root:
            raise ValueError("checkpoint root must be non-empty")
        if self.epoch < 0:
            raise ValueError("checkpoint epoch must be non-negative")


def root_hex(root: Optional[bytes]) -> str:
    if root is None:
        return ""
    return "0x" + root.hex()


def parse_root(value: str) -> bytes:
    text = (value or "").strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise ValueError(f"invalid root {value!r}") from exc
    if len(raw) != ROOT_BYTES:
        raise ValueError(f"root must be {ROOT_BYTES} bytes, got {len(raw)}")
    return raw


def epoch_of(slot: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
    if slot < 0:
        raise ValueError(f"slot must be non-negative, got {slot}")
    return slot // spec.slots_per_epoch


def slot_in_epoch(slot: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
    if slot < 0:
        raise ValueError(f"slot must be non-negative, got {slot}")
    return slot % spec.slots_per_epoch


def epoch_start_slot(epoch: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
    return epoch * spec.slots_per_epoch


def sync_period_of(epoch: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
    return epoch // spec.sync_committee_period_epochs


def slot_wall_times(slot: int, spec: ChainSpec = DEFAULT_SPEC) -> SlotTimes:
    if slot < 0:
        raise ValueError(f"slot must be non-negative, got {slot}")
    start = spec.genesis_time + slot * spec.seconds_per_slot
    return SlotTimes(
        start=start,
        attestation_deadline=start + spec.attestation_deadline_s,
        aggregation_deadline=start + spec.aggregation_deadline_s,
        end=start + spec.seconds_per_slot,
    )


@dataclass(frozen=True)
class SlotClock:
    spec: ChainSpec = DEFAULT_SPEC

    @property
    def genesis_ms(self) -> int:
        return self.spec.genesis_time * 1000

    def slot_start_ms(self, slot: int) -> int:
        return self.genesis_ms + slot * self.spec.slot_ms

    def offset_ms(self, slot: int, wall_ms: int) -> int:
        return wall_ms - self.slot_start_ms(slot)

    def slot_at(self, wall_ms: int) -> int:
        """Slot containing ``wall_ms``; -1 before genesis."""
        if wall_ms < self.genesis_ms:
            return -1
        return (wall_ms - self.genesis_ms) // self.spec.slot_ms


# --- duties -----------------------------------------------------------------


@dataclass(frozen=True)
class DutyAssignment:
    validator_id: int
    epoch: int
    attestation_slot: int
    committee_index: int
    is_aggregator: bool
    proposer_slots: tuple[int, ...] = ()
    sync_member_periods: tuple[int, ...] = ()

    @property
    def is_sync_member(self) -> bool:
        return bool(self.sync_member_periods)


@dataclass(frozen=True)
class EpochDuties:
    epoch: int
    assignments: tuple[DutyAssignment, ...]
    proposers: tuple[int, ...]
    committees: Mapping[tuple[int, int], tuple[int, ...]] = field(hash=False)
    sync_members: frozenset[int] = frozenset()

    def committee(self, slot: int, index: int) -> tuple[int, ...]:
        return self.committees[(slot, index)]

    def committees_at(self, slot: int) -> list[tuple[int, tuple[int, ...]]]:
        out = [(idx, members) for (s, idx), members in self.committees.items() if s == slot]
        out.sort(key=lambda item: item[0])
        return out

    def aggregators(self, slot: int, index: int, spec: ChainSpec = DEFAULT_SPEC) -> tuple[int, ...]:
        return self.committees[(slot, index)][: spec.aggregators_per_committee]

    def proposer(self, slot: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
        return self.proposers[slot_in_epoch(slot, spec)]


def _keyed_rng(seed: bytes, label: bytes, number: int) -> np.random.Generator:
    digest = hashlib.sha256(seed + label + number.to_bytes(8, "little")).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _check_seed(seed: bytes) -> None:
    if len(seed) != 32:
        raise ValueError(f"seed must be 32 bytes, got {len(seed)}")


def committees_per_slot(validators: int, spec: ChainSpec = DEFAULT_SPEC) -> int:
    per_slot = validators // spec.slots_per_epoch // spec.target_committee_size
    return max(1, min(spec.max_committees_per_slot, per_slot))


def sync_committee(validators: int, period: int, seed: bytes, spec: ChainSpec = DEFAULT_SPEC) -> tuple[int, ...]:
    _check_seed(seed)
    if validators < 1:
        raise ValueError("at least one validator is required")
    rng = _keyed_rng(seed, b"sync", period)
    picked = rng.permutation(validators)[: min(spec.sync_committee_size, validators)]
    return tuple(sorted(int(v) for v in picked))


def assign_duties(validators: int, epoch: int, seed: bytes, spec: ChainSpec = DEFAULT_SPEC) -> EpochDuties:
    """Seeded partition of the validator set into the slots and committees of one epoch."""
    _check_seed(seed)
    if validators < 1:
        raise ValueError("at least one validator is required")
    if epoch < 0:
        raise ValueError("epoch must be non-negative")

    spe = spec.slots_per_epoch
    rng = _keyed_rng(seed, b"duties", epoch)
    order = rng.permutation(validators)
    proposers = tuple(int(v) for v in rng.integers(0, validators, size=spe))
    n_committees = committees_per_slot(validators, spec)
    first_slot = epoch * spe
    period = sync_period_of(epoch, spec)
    members_of_sync = frozenset(sync_committee(validators, period, seed, spec))

    proposer_slots: dict[int, list[int]] = {}
    for offset, proposer in enumerate(proposers):
        proposer_slots.setdefault(proposer, []).append(first_slot + offset)

    committees: dict[tuple[int, int], tuple[int, ...]] = {}
    placement: dict[int, tuple[int, int, bool]] = {}
    slot_bounds = [(i * validators) // spe for i in range(spe + 1)]
    for offset in range(spe):
        slot = first_slot + offset
        members = order[slot_bounds[offset] : slot_bounds[offset + 1]]
        size = len(members)
        committee_bounds = [(j * size) // n_committees for j in range(n_committees + 1)]
        for index in range(n_committees):
            committee = tuple(int(v) for v in members[committee_bounds[index] : committee_bounds[index + 1]])
            committees[(slot, index)] = committee
            for position, validator in enumerate(committee):
                placement[validator] = (slot, index, position < spec.aggregators_per_committee)

    assignments = []
    for validator in range(validators):
        slot, index, is_aggregator = placement[validator]
        assignments.append(
            DutyAssignment(
                validator_id=validator,
                epoch=epoch,
                attestation_slot=slot,
                committee_index=index,
                is_aggregator=is_aggregator,
                proposer_slots=tuple(proposer_slots.get(validator, ())),
                sync_member_periods=(period,) if validator in members_of_sync else (),
            )
        )
    return EpochDuties(
        epoch=epoch,
        assignments=tuple(assignments),
        proposers=proposers,
        committees=committees,
        sync_members=members_of_sync,
    )


class CommitteeCache:
    """Lazily computed duties per epoch; also serves committee lookups for block scoring."""

    def __init__(self, validators: int, seed: bytes, spec: ChainSpec = DEFAULT_SPEC) -> None:
        _check_seed(seed)
        self.validators = validators
        self.seed = seed
        self.spec = spec
        self._epochs: dict[int, EpochDuties] = {}
        self._lock = threading.Lock()

    def duties(self, epoch: int) -> EpochDuties:
        cached = self._epochs.get(epoch)
        if cached is not None:
            return cached
        with self._lock:
            if epoch not in self._epochs:
                self._epochs[epoch] = assign_duties(self.validators, epoch, self.seed, self.spec)
            return self._epochs[epoch]

    def committee(self, slot: int, index: int) -> tuple[int, ...]:
        if slot < 0:
            raise KeyError((slot, index))
        return self.duties(epoch_of(slot, self.spec)).committees[(slot, index)]


# --- chain views ------------------------------------------------------------


class HeadView(Protocol):
    def head_at(self, slot: int, offset_s: float) -> bytes: ...


def _check_query(slot: int, offset_s: float) -> None:
    if slot < 0 or (slot == 0 and offset_s < 0):
        raise ValueError("query before genesis")


@dataclass(frozen=True)
class ChainView:
    """Canonical chain: one root per slot (EMPTY_SLOT when no block), parent-linked to an anchor."""

    spec: ChainSpec
    anchor_root: bytes
    roots: tuple[Optional[bytes], ...]
    parents: tuple[Optional[bytes], ...]
    _latest: tuple[int, ...] = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.anchor_root:
            raise ValueError("anchor root must be non-empty")
        if len(self.roots) != len(self.parents):
            raise ValueError("roots and parents must cover the same slots")
        latest: list[int] = []
        expected_parent = self.anchor_root
        last = -1
        for slot, (root, parent) in enumerate(zip(self.roots, self.parents)):
            if root is EMPTY_SLOT:
                if parent is not None:
                    raise ValueError(f"empty slot {slot} cannot carry a parent")
            else:
                if parent != expected_parent:
                    raise ValueError(f"block at slot {slot} does not extend the previous canonical root")
                expected_parent = root
                last = slot
            latest.append(last)
        object.__setattr__(self, "_latest", tuple(latest))

    @classmethod
    def from_blocks(
        cls,
        spec: ChainSpec,
        anchor_root: bytes,
        blocks: Mapping[int, tuple[bytes, bytes]],
        num_slots: int,
    ) -> "ChainView":
        roots: list[Optional[bytes]] = [EMPTY_SLOT] * num_slots
        parents: list[Optional[bytes]] = [None] * num_slots
        for slot, (root, parent) in blocks.items():
            if not 0 <= slot < num_slots:
                raise ValueError(f"block slot {slot} outside view of {num_slots} slots")
            roots[slot] = root
            parents[slot] = parent
        return cls(spec=spec, anchor_root=anchor_root, roots=tuple(roots), parents=tuple(parents))

    @property
    def num_slots(self) -> int:
        return len(self.roots)

    def _covers(self, slot: int) -> None:
        if slot >= self.num_slots:
            raise ValueError(f"slot {slot} is beyond the view ({self.num_slots} slots)")

    def root_at(self, slot: int) -> Optional[bytes]:
        self._covers(slot)
        return self.roots[slot]

    def block_root_at(self, slot: int) -> bytes:
        """Latest canonical root at or before ``slot`` (anchor when none)."""
        if slot < 0:
            return self.anchor_root
        self._covers(slot)
        latest = self._latest[slot]
        return self.anchor_root if latest < 0 else self.roots[latest]  # type: ignore[return-value]

    def head_at(self, slot: int, offset_s: float = 0.0) -> bytes:
        _check_query(slot, offset_s)
        return self.block_root_at(slot)

    def target(self, epoch: int) -> Checkpoint:
        spe = self.spec.slots_per_epoch
        first = epoch * spe
        self._covers(first)
        for slot in range(first, min(first + spe, self.num_slots)):
            root = self.roots[slot]
            if root is not EMPTY_SLOT:
                return Checkpoint(epoch, root)
        return Checkpoint(epoch, self.block_root_at(first - 1))

    def justified(self, slot: int) -> Checkpoint:
        epoch = epoch_of(slot, self.spec)
        if epoch == 0:
            return Checkpoint(0, self.anchor_root)
        return self.target(epoch - 1)

    def empty_slots(self) -> list[int]:
        return [slot for slot, root in enumerate(self.roots) if root is EMPTY_SLOT]


@dataclass(frozen=True)
class LocalView:
    """A node's view over time, built from (processed_ms, slot, root) samples relative to genesis."""

    spec: ChainSpec
    anchor_root: bytes
    processed: tuple[tuple[int, int, bytes], ...]
    _times: tuple[int, ...] = field(default=(), init=False, repr=False, compare=False)
    _heads: tuple[tuple[int, bytes], ...] = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ordered = sorted(self.processed, key=lambda item: item[0])
        times: list[int] = []
        heads: list[tuple[int, bytes]] = []
        best_slot = -1
        best_root = self.anchor_root
        for processed_ms, slot, root in ordered:
            if slot >= best_slot:
                best_slot, best_root = slot, root
            times.append(processed_ms)
            heads.append((best_slot, best_root))
        object.__setattr__(self, "processed", tuple(ordered))
        object.__setattr__(self, "_times", tuple(times))
        object.__setattr__(self, "_heads", tuple(heads))

    def head_at(self, slot: int, offset_s: float = 0.0) -> bytes:
        _check_query(slot, offset_s)
        at_ms = slot * self.spec.slot_ms + int(round(offset_s * 1000))
        idx = bisect.bisect_right(self._times, at_ms)
        if idx == 0:
            return self.anchor_root
        return self._heads[idx - 1][1]


def head_at(view: HeadView, slot: int, offset_s: float) -> bytes:
    return view.head_at(slot, offset_s)


# --- config file ------------------------------------------------------------

_SPEC_KEYS = {f.name for f in fields(ChainSpec)}


def _coerce_spec_values(values: Mapping[str, str], source: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for raw_key, raw_value in values.items():
        key = raw_key.strip().lower()
        if key not in _SPEC_KEYS:
            raise ConfigError(f"unknown chain spec key {raw_key!r} in {source}")
        try:
            out[key] = int(str(raw_value).strip())
        except ValueError as exc:
            raise ConfigError(f"chain spec key {key} in {source} must be an integer, got {raw_value!r}") from exc
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def chain_spec_from_mapping(
    values: Mapping[str, str],
    base: ChainSpec = DEFAULT_SPEC,
    source: str = "mapping",
) -> ChainSpec:
    return replace(base, **_coerce_spec_values(values, source))


def load_chain_spec(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> ChainSpec:
    """Read a ``key = value`` chain spec file (``#`` comments), then apply overrides."""
    spec = DEFAULT_SPEC
    if path is not None:
        file_path = Path(path)
        try:
            text = file_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read chain spec {file_path}: {exc}") from exc
        parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",))
        try:
            parser.read_string("[chain]\n" + text, source=str(file_path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed chain spec {file_path}: {exc}") from exc
        spec = chain_spec_from_mapping(dict(parser["chain"]), spec, str(file_path))
    if overrides:
        spec = chain_spec_from_mapping(overrides, spec, "overrides")
    return spec
