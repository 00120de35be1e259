"""
Report kinds over a record log. Every cell is rendered as text before the
frame is printed so the same log always produces the same bytes.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .errors import ConfigError, InsufficientDataError
from .record_log import RecordLog
from .schemas import (
    RECORD_TYPES,
    ArrivalRow,
    BlockScoreRow,
    EpochPerformanceRow,
    GroundTruthRow,
    ReorgRow,
    SyncSpanRow,
)
from .services.chain import DEFAULT_SPEC, ChainSpec, epoch_start_slot
from .services.duties import aggregate_stats
from .services.pipeline import arrival_from_row, performance_from_row, reorg_from_row
from .services.telemetry import REPORTED_PERCENTILES, mean_offset_by, offsets_cdf, reorg_stats

logger = logging.getLogger(__name__)

ReportKind = Literal[
    "rewards_by_location",
    "missed_flags",
    "missed_blocks",
    "reorgs",
    "block_scores",
    "arrival_cdf",
    "out_of_sync",
    "client_location_heatmap",
]
REPORT_KINDS: tuple[str, ...] = (
    "rewards_by_location",
    "missed_flags",
    "missed_blocks",
    "reorgs",
    "block_scores",
    "arrival_cdf",
    "out_of_sync",
    "client_location_heatmap",
)
REQUIRED_TYPES: dict[str, tuple[str, ...]] = {
    "rewards_by_location": ("epoch_performance",),
    "missed_flags": ("epoch_performance",),
    "missed_blocks": ("epoch_performance",),
    # Groups come from sync spans so nodes without reorgs still get a row.
    "reorgs": ("sync_span",),
    "block_scores": ("block_score",),
    "arrival_cdf": ("arrival",),
    "out_of_sync": ("sync_span",),
    "client_location_heatmap": ("arrival",),
}
ALL_GROUPS = "(all)"
# Per-candidate score breakdown averaged by the block_scores report.
BREAKDOWN = ("new_votes", "new_source", "new_target", "new_head")


@dataclass(frozen=True)
class ReportSpec:
    kind: str
    group_by: Literal["location", "client", "node"] = "location"
    from_slot: Optional[int] = None
    to_slot: Optional[int] = None
    fmt: Literal["table", "csv"] = "table"

    def __post_init__(self) -> None:
        if self.kind not in REPORT_KINDS:
            raise ConfigError(f"unknown report kind {self.kind!r}; expected one of {', '.join(REPORT_KINDS)}")
        if self.group_by not in ("location", "client", "node"):
            raise ConfigError(f"unknown grouping {self.group_by!r}")
        if self.fmt not in ("table", "csv"):
            raise ConfigError(f"unknown output format {self.fmt!r}")
        for name in ("from_slot", "to_slot"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.from_slot is not None and self.to_slot is not None and self.from_slot > self.to_slot:
            raise ConfigError(f"empty slot window [{self.from_slot}, {self.to_slot}]")

    def in_window(self, slot: int) -> bool:
        if self.from_slot is not None and slot < self.from_slot:
            return False
        return self.to_slot is None or slot <= self.to_slot


@dataclass(frozen=True)
class RenderedReport:
    spec: ReportSpec
    frame: pd.DataFrame

    @property
    def table(self) -> str:
        if self.frame.empty:
            return " ".join(self.frame.columns) + "\n(no rows)\n"
        return self.frame.to_string(index=False) + "\n"

    @property
    def csv(self) -> str:
        return self.frame.to_csv(index=False, lineterminator="\n")

    def render(self) -> str:
        return self.csv if self.spec.fmt == "csv" else self.table


def _pct(value: float) -> str:
    return f"{value:.1f}"


def _num(value: float) -> str:
    return f"{value:.1f}"


def _frame(rows: list[dict], columns: Sequence[str]) -> pd.DataFrame:
    if not rows:
        return pd.DataFrame(columns=list(columns))
    return pd.DataFrame(rows, columns=list(columns)).astype(str)


def _group_of(row: BaseModel, group_by: str) -> str:
    return getattr(row, "node_id" if group_by == "node" else group_by) or "unknown"


# --- epoch performance ----------------------------------------------------------------


def _performances(spec: ReportSpec, rows: Iterable[EpochPerformanceRow], chain: ChainSpec):
    return [performance_from_row(r) for r in rows if spec.in_window(epoch_start_slot(r.epoch, chain))]


def _rewards(spec: ReportSpec, rows: list[EpochPerformanceRow], chain: ChainSpec) -> pd.DataFrame:
    records = _performances(spec, rows, chain)
    stats = aggregate_stats(records, spec.group_by)
    out = [
        {
            spec.group_by: r.group,
            "records": r.records,
            "achieved": _num(r.achieved),
            "mer": _num(r.mer),
            "achieved_pct": _pct(r.achieved_pct),
        }
        for r in stats.rows
    ]
    if stats.rows:
        achieved = sum(r.achieved for r in stats.rows)
        mer = sum(r.mer for r in stats.rows)
        out.append(
            {
                spec.group_by: ALL_GROUPS,
                "records": sum(r.records for r in stats.rows),
                "achieved": _num(achieved),
                "mer": _num(mer),
                "achieved_pct": _pct(100.0 * achieved / mer if mer else 0.0),
            }
        )
    return _frame(out, [spec.group_by, "records", "achieved", "mer", "achieved_pct"])


def _missed_flags(spec: ReportSpec, rows: list[EpochPerformanceRow], chain: ChainSpec) -> pd.DataFrame:
    stats = aggregate_stats(_performances(spec, rows, chain), spec.group_by)
    out = [
        {
            spec.group_by: r.group,
            "attestations": r.attestations,
            "missed_source_pct": _pct(100.0 * r.missed_source_ratio),
            "missed_target_pct": _pct(100.0 * r.missed_target_ratio),
            "missed_head_pct": _pct(100.0 * r.missed_head_ratio),
        }
        for r in stats.rows
    ]
    return _frame(out, [spec.group_by, "attestations", "missed_source_pct", "missed_target_pct", "missed_head_pct"])


def _missed_blocks(spec: ReportSpec, rows: list[EpochPerformanceRow], chain: ChainSpec) -> pd.DataFrame:
    stats = aggregate_stats(_performances(spec, rows, chain), spec.group_by)
    out = [
        {
            spec.group_by: r.group,
            "proposals": r.proposals_assigned,
            "missed": r.proposals_missed,
            "missed_pct": _pct(100.0 * r.missed_proposal_ratio),
        }
        for r in stats.rows
    ]
    return _frame(out, [spec.group_by, "proposals", "missed", "missed_pct"])


# --- telemetry ---------------------------------------------------------------------------


def _reorgs(spec: ReportSpec, reorgs: list[ReorgRow], spans: list[SyncSpanRow]) -> pd.DataFrame:
    groups = sorted({_group_of(s, spec.group_by) for s in spans})
    events = [reorg_from_row(r) for r in reorgs if spec.in_window(r.slot)]
    stats = reorg_stats(events, spec.group_by, groups)
    out = [
        {
            spec.group_by: r.group,
            "reorgs": r.count,
            "mean_depth": _num(r.mean_depth) if r.mean_depth is not None else "",
            "delta_vs_average": _num(r.delta_vs_average),
        }
        for r in stats.rows
    ]
    return _frame(out, [spec.group_by, "reorgs", "mean_depth", "delta_vs_average"])


def _block_scores(spec: ReportSpec, rows: list[BlockScoreRow]) -> pd.DataFrame:
    buckets: dict[str, list[BlockScoreRow]] = defaultdict(list)
    for row in rows:
        if spec.in_window(row.slot):
            buckets[_group_of(row, spec.group_by)].append(row)
    out = []
    for group in sorted(buckets):
        scored = [r for r in buckets[group] if r.status == "ok"]
        scores = np.array([r.score for r in scored], dtype=float)
        normalized = np.array([r.normalized for r in scored], dtype=float)
        entry = {
            spec.group_by: group,
            "requests": len(buckets[group]),
            "candidates": len(scored),
            "unavailable": len(buckets[group]) - len(scored),
            "best": sum(1 for r in scored if r.rank == 1),
            "mean_score": f"{scores.mean():.3f}" if scores.size else "",
            "mean_normalized_pct": _pct(100.0 * normalized.mean()) if normalized.size else "",
        }
        for part in BREAKDOWN:
            values = np.array([getattr(r, part) for r in scored], dtype=float)
            entry[f"mean_{part}"] = _num(values.mean()) if values.size else ""
        out.append(entry)
    return _frame(
        out,
        [spec.group_by, "requests", "candidates", "unavailable", "best", "mean_score", "mean_normalized_pct"]
        + [f"mean_{part}" for part in BREAKDOWN],
    )


def _block_arrivals(spec: ReportSpec, rows: list[ArrivalRow]) -> list[ArrivalRow]:
    return [r for r in rows if r.kind == "block" and spec.in_window(r.slot)]


def _arrival_cdf(spec: ReportSpec, rows: list[ArrivalRow]) -> pd.DataFrame:
    arrivals = _block_arrivals(spec, rows)
    buckets: dict[str, list[int]] = defaultdict(list)
    for row in arrivals:
        buckets[_group_of(row, spec.group_by)].append(row.offset_ms)
    if arrivals:
        buckets[ALL_GROUPS] = [r.offset_ms for r in arrivals]
    out = []
    for group in sorted(buckets):
        cdf = offsets_cdf(buckets[group])
        for percentile in REPORTED_PERCENTILES:
            out.append({spec.group_by: group, "percentile": f"p{percentile}", "offset_ms": cdf.at(percentile)})
        out.append({spec.group_by: group, "percentile": "mean", "offset_ms": f"{cdf.mean_ms:.0f}"})
    return _frame(out, [spec.group_by, "percentile", "offset_ms"])


def _out_of_sync(spec: ReportSpec, rows: list[SyncSpanRow]) -> pd.DataFrame:
    per_node: dict[str, list[SyncSpanRow]] = defaultdict(list)
    for row in rows:
        per_node[row.node_id].append(row)
    out = []
    for node_id in sorted(per_node):
        measured = lagging = 0
        for row in per_node[node_id]:
            first = max(row.first_slot, spec.from_slot if spec.from_slot is not None else row.first_slot)
            last = min(row.last_slot, spec.to_slot if spec.to_slot is not None else row.last_slot)
            if last < first:
                continue
            measured += last - first + 1
            if row.state == "out_of_sync":
                lagging += last - first + 1
        first_row = per_node[node_id][0]
        out.append(
            {
                "node": node_id,
                "location": first_row.location,
                "client": first_row.client,
                "slots": measured,
                "out_of_sync_slots": lagging,
                "out_of_sync_pct": _pct(100.0 * lagging / measured if measured else 0.0),
            }
        )
    return _frame(out, ["node", "location", "client", "slots", "out_of_sync_slots", "out_of_sync_pct"])


def _heatmap(spec: ReportSpec, rows: list[ArrivalRow]) -> pd.DataFrame:
    means = mean_offset_by((arrival_from_row(r) for r in _block_arrivals(spec, rows)), ("client", "location"))
    locations = sorted({location for _, location in means})
    if not means:
        return pd.DataFrame(columns=["client"])
    cells = pd.DataFrame(
        [{"client": client, "location": location, "mean_ms": mean} for (client, location), (_, mean) in means.items()]
    )
    matrix = cells.pivot(index="client", columns="location", values="mean_ms").reindex(columns=locations).sort_index()
    text = matrix.apply(lambda col: col.map(lambda v: "" if pd.isna(v) else f"{v:.0f}"))
    text = text.reset_index()
    text.columns.name = None
    return text


# --- entrypoints ---------------------------------------------------------------------------


def _check_required(kind: str, present: Iterable[str]) -> None:
    have = set(present)
    missing = [t for t in REQUIRED_TYPES[kind] if t not in have]
    if missing:
        raise InsufficientDataError(missing)


def chain_from_rows(rows: Iterable[BaseModel]) -> ChainSpec:
    """Epoch length recorded by the first simulation run in ``rows``; mainnet defaults otherwise."""
    for row in rows:
        if isinstance(row, GroundTruthRow) and row.kind == "run" and row.slots_per_epoch:
            return replace(DEFAULT_SPEC, slots_per_epoch=row.slots_per_epoch)
    return DEFAULT_SPEC


def report_from_rows(spec: ReportSpec, rows: Sequence[BaseModel], chain: Optional[ChainSpec] = None) -> RenderedReport:
    chain = chain or chain_from_rows(rows)
    by_type: dict[str, list] = {kind: [] for kind in RECORD_TYPES}
    for row in rows:
        by_type[row.type].append(row)  # type: ignore[attr-defined]
    _check_required(spec.kind, (t for t, items in by_type.items() if items))

    builders: dict[str, Callable[[], pd.DataFrame]] = {
        "rewards_by_location": lambda: _rewards(spec, by_type["epoch_performance"], chain),
        "missed_flags": lambda: _missed_flags(spec, by_type["epoch_performance"], chain),
        "missed_blocks": lambda: _missed_blocks(spec, by_type["epoch_performance"], chain),
        "reorgs": lambda: _reorgs(spec, by_type["reorg"], by_type["sync_span"]),
        "block_scores": lambda: _block_scores(spec, by_type["block_score"]),
        "arrival_cdf": lambda: _arrival_cdf(spec, by_type["arrival"]),
        "out_of_sync": lambda: _out_of_sync(spec, by_type["sync_span"]),
        "client_location_heatmap": lambda: _heatmap(spec, by_type["arrival"]),
    }
    return RenderedReport(spec, builders[spec.kind]())


def report(spec: ReportSpec, log: RecordLog, chain: Optional[ChainSpec] = None) -> RenderedReport:
    read = log.read()
    rendered = report_from_rows(spec, read.rows(), chain)
    logger.info("Built %s report from %s records in %s.", spec.kind, len(read.records), log.path)
    return rendered


def export_csv(log: RecordLog, directory: str | Path) -> dict[str, Path]:
    """One relational-ready CSV per record type, columns in schema order."""
    models = {
        "arrival": ArrivalRow,
        "block_score": BlockScoreRow,
        "epoch_performance": EpochPerformanceRow,
        "reorg": ReorgRow,
        "sync_span": SyncSpanRow,
        "ground_truth": GroundTruthRow,
    }
    read = log.read()
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    for kind, model in models.items():
        columns = ["id"] + [name for name in model.model_fields if name != "type"]
        records = [
            {"id": rec.id, **rec.row.model_dump(mode="json", exclude={"type"})} for rec in read.records if rec.type == kind
        ]
        frame = pd.DataFrame(records, columns=columns)
        path = target / f"{kind}.csv"
        frame.to_csv(path, index=False, lineterminator="\n")
        written[kind] = path
    return written
