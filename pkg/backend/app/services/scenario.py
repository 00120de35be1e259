"""
Simulation scenarios: regions, nodes, faults and the INI file format.

    [simulation]
    name = two-regions
    seed = 7
    duration_slots = 128

    [chain]                      # optional ChainSpec overrides
    slots_per_epoch = 32

    [region near]
    median_ms = 1400             # inbound lognormal median
    sigma = 0.45
    shift_ms = 0                 # constant added to every sample
    processing_ms = 20
    jitter_ms = 10
    peer_count = 50
    from.far = 2600 0.5          # median/sigma override for senders in region "far"

    [node near-1]
    region = near
    client = lighthouse
    validators = 128
    peer_count = 160             # optional per-node overrides

    [fault drop-1]
    kind = stream_drop
    node = near-1
    first_slot = 40
    last_slot = 47
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Final, Literal, Mapping, Optional, Sequence

from ..errors import ConfigError
from .chain import DEFAULT_SPEC, ChainSpec, chain_spec_from_mapping

logger = logging.getLogger(__name__)

FaultKind = Literal["node_down", "clock_skew", "stream_drop", "late_publish", "slow_response"]
FAULT_KINDS: Final[tuple[str, ...]] = ("node_down", "clock_skew", "stream_drop", "late_publish", "slow_response")
REFERENCE_PEERS: Final = 50


@dataclass(frozen=True)
class LatencyModel:
    median_ms: float = 0.0
    sigma: float = 0.0
    shift_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.median_ms < 0 or self.sigma < 0 or self.shift_ms < 0:
            raise ConfigError("latency parameters must be non-negative")


@dataclass(frozen=True)
class RegionProfile:
    name: str
    inbound: LatencyModel = LatencyModel()
    from_regions: Mapping[str, LatencyModel] = field(default_factory=dict, hash=False)
    processing_ms: float = 0.0
    jitter_ms: float = 0.0
    peer_count: int = REFERENCE_PEERS

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("region name must be non-empty")
        if self.processing_ms < 0 or self.jitter_ms < 0:
            raise ConfigError(f"region {self.name}: processing delays must be non-negative")
        if self.peer_count < 1:
            raise ConfigError(f"region {self.name}: peer_count must be at least 1")

    def latency_from(self, source_region: str) -> LatencyModel:
        return self.from_regions.get(source_region, self.inbound)


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    region: str
    client: str
    validators: int = 0
    processing_ms: Optional[float] = None
    jitter_ms: Optional[float] = None
    peer_count: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.node_id or not self.region or not self.client:
            raise ConfigError("node id, region and client labels must be non-empty")
        if self.validators < 0:
            raise ConfigError(f"node {self.node_id}: validators must be non-negative")
        if self.peer_count is not None and self.peer_count < 1:
            raise ConfigError(f"node {self.node_id}: peer_count must be at least 1")


@dataclass(frozen=True)
class FaultSpec:
    name: str
    kind: FaultKind
    node_id: str
    first_slot: int
    last_slot: int
    offset_ms: int = 0
    delay_ms: int = 0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"fault {self.name}: unknown kind {self.kind!r}")
        if self.first_slot < 0 or self.last_slot < self.first_slot:
            raise ConfigError(f"fault {self.name}: invalid window [{self.first_slot}, {self.last_slot}]")
        if self.delay_ms < 0:
            raise ConfigError(f"fault {self.name}: delay_ms must be non-negative")

    def covers(self, slot: int) -> bool:
        return self.first_slot <= slot <= self.last_slot


@dataclass(frozen=True)
class NodeProfile:
    """Resolved per-node parameters."""

    node_id: str
    region: str
    client: str
    processing_ms: float
    jitter_ms: float
    peer_count: int
    first_validator: int
    validators: int

    @property
    def load_factor(self) -> float:
        return self.peer_count / REFERENCE_PEERS


@dataclass(frozen=True)
class SimConfig:
    name: str
    spec: ChainSpec
    regions: tuple[RegionProfile, ...]
    nodes: tuple[NodeSpec, ...]
    duration_slots: int
    seed: int = 0
    faults: tuple[FaultSpec, ...] = ()

    def __post_init__(self) -> None:
        region_names = [r.name for r in self.regions]
        if len(set(region_names)) != len(region_names):
            raise ConfigError("duplicate region names")
        node_ids = [n.node_id for n in self.nodes]
        if not node_ids:
            raise ConfigError("a scenario needs at least one node")
        if len(set(node_ids)) != len(node_ids):
            raise ConfigError("duplicate node ids")
        for node in self.nodes:
            if node.region not in region_names:
                raise ConfigError(f"node {node.node_id} references unknown region {node.region!r}")
        for region in self.regions:
            for source in region.from_regions:
                if source not in region_names:
                    raise ConfigError(f"region {region.name} overrides latency from unknown region {source!r}")
        if self.validator_count < 1:
            raise ConfigError("a scenario needs at least one validator")
        if self.duration_slots < self.spec.slots_per_epoch:
            raise ConfigError(f"duration must cover at least one epoch ({self.spec.slots_per_epoch} slots)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        for fault in self.faults:
            _check_fault(self, fault)

    @property
    def validator_count(self) -> int:
        return sum(n.validators for n in self.nodes)

    @property
    def region_map(self) -> dict[str, RegionProfile]:
        return {r.name: r for r in self.regions}

    def profiles(self) -> tuple[NodeProfile, ...]:
        regions = self.region_map
        out = []
        first = 0
        for node in self.nodes:
            region = regions[node.region]
            out.append(
                NodeProfile(
                    node_id=node.node_id,
                    region=node.region,
                    client=node.client,
                    processing_ms=region.processing_ms if node.processing_ms is None else node.processing_ms,
                    jitter_ms=region.jitter_ms if node.jitter_ms is None else node.jitter_ms,
                    peer_count=region.peer_count if node.peer_count is None else node.peer_count,
                    first_validator=first,
                    validators=node.validators,
                )
            )
            first += node.validators
        return tuple(out)

    def faults_for(self, node_id: str, kind: str) -> list[FaultSpec]:
        return [f for f in self.faults if f.node_id == node_id and f.kind == kind]

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


def _check_fault(config: SimConfig, fault: FaultSpec) -> None:
    if fault.node_id not in {n.node_id for n in config.nodes}:
        raise ConfigError(f"fault {fault.name} targets unknown node {fault.node_id!r}")
    if fault.last_slot >= config.duration_slots:
        raise ConfigError(f"fault {fault.name} window ends after the run ({config.duration_slots} slots)")
    for other in config.faults:
        if other is fault or other.node_id != fault.node_id or other.kind != fault.kind:
            continue
        if other.first_slot <= fault.last_slot and fault.first_slot <= other.last_slot:
            raise ConfigError(f"fault {fault.name} overlaps {other.name} ({fault.kind} on {fault.node_id})")


def inject_fault(
    config: SimConfig,
    kind: FaultKind,
    node_id: str,
    window: tuple[int, int],
    *,
    offset_ms: int = 0,
    delay_ms: int = 0,
    name: Optional[str] = None,
) -> SimConfig:
    first, last = window
    fault = FaultSpec(
        name=name or f"{kind}-{node_id}-{first}",
        kind=kind,
        node_id=node_id,
        first_slot=first,
        last_slot=last,
        offset_ms=offset_ms,
        delay_ms=delay_ms,
    )
    return replace(config, faults=config.faults + (fault,))


# --- file format -------------------------------------------------------------------


def _section_float(section: configparser.SectionProxy, key: str, default: float, where: str) -> float:
    try:
        return section.getfloat(key, fallback=default)
    except ValueError as exc:
        raise ConfigError(f"{where}: {key} must be a number") from exc


def _section_int(section: configparser.SectionProxy, key: str, default: Optional[int], where: str) -> Optional[int]:
    try:
        return section.getint(key, fallback=default)
    except ValueError as exc:
        raise ConfigError(f"{where}: {key} must be an integer") from exc


def _parse_override(raw: str, where: str) -> LatencyModel:
    parts = raw.split()
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{where}: latency override must be 'median sigma [shift]', got {raw!r}") from exc
    if not 1 <= len(values) <= 3:
        raise ConfigError(f"{where}: latency override must be 'median sigma [shift]', got {raw!r}")
    return LatencyModel(*values)


def _region_from_section(name: str, section: configparser.SectionProxy) -> RegionProfile:
    where = f"region {name}"
    overrides = {
        key[len("from.") :]: _parse_override(value, where) for key, value in section.items() if key.startswith("from.")
    }
    return RegionProfile(
        name=name,
        inbound=LatencyModel(
            median_ms=_section_float(section, "median_ms", 0.0, where),
            sigma=_section_float(section, "sigma", 0.0, where),
            shift_ms=_section_float(section, "shift_ms", 0.0, where),
        ),
        from_regions=overrides,
        processing_ms=_section_float(section, "processing_ms", 0.0, where),
        jitter_ms=_section_float(section, "jitter_ms", 0.0, where),
        peer_count=_section_int(section, "peer_count", REFERENCE_PEERS, where) or REFERENCE_PEERS,
    )


def _node_from_section(node_id: str, section: configparser.SectionProxy) -> NodeSpec:
    where = f"node {node_id}"
    processing = section.get("processing_ms")
    jitter = section.get("jitter_ms")
    return NodeSpec(
        node_id=node_id,
        region=section.get("region", ""),
        client=section.get("client", ""),
        validators=_section_int(section, "validators", 0, where) or 0,
        processing_ms=_section_float(section, "processing_ms", 0.0, where) if processing is not None else None,
        jitter_ms=_section_float(section, "jitter_ms", 0.0, where) if jitter is not None else None,
        peer_count=_section_int(section, "peer_count", None, where),
    )


def _fault_from_section(name: str, section: configparser.SectionProxy) -> FaultSpec:
    where = f"fault {name}"
    first = _section_int(section, "first_slot", None, where)
    last = _section_int(section, "last_slot", first, where)
    if first is None or last is None:
        raise ConfigError(f"{where}: first_slot is required")
    return FaultSpec(
        name=name,
        kind=section.get("kind", ""),  # type: ignore[arg-type]
        node_id=section.get("node", ""),
        first_slot=first,
        last_slot=last,
        offset_ms=_section_int(section, "offset_ms", 0, where) or 0,
        delay_ms=_section_int(section, "delay_ms", 0, where) or 0,
    )


def parse_scenario(
    text: str,
    source: str = "<scenario>",
    *,
    seed: Optional[int] = None,
    spec_overrides: Optional[Mapping[str, str]] = None,
    base_spec: ChainSpec = DEFAULT_SPEC,
) -> SimConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    # Region names appear in keys (from.<region>) and must keep their case.
    parser.optionxform = str  # type: ignore[assignment, method-assign]
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed scenario {source}: {exc}") from exc

    if not parser.has_section("simulation"):
        raise ConfigError(f"{source}: missing [simulation] section")
    sim = parser["simulation"]
    spec = base_spec
    if parser.has_section("chain"):
        spec = chain_spec_from_mapping(dict(parser["chain"]), spec, f"{source} [chain]")
    if spec_overrides:
        spec = chain_spec_from_mapping(spec_overrides, spec, "overrides")

    regions: list[RegionProfile] = []
    nodes: list[NodeSpec] = []
    faults: list[FaultSpec] = []
    for section_name in parser.sections():
        kind, _, label = section_name.partition(" ")
        label = label.strip()
        if section_name in ("simulation", "chain"):
            continue
        if kind == "region" and label:
            regions.append(_region_from_section(label, parser[section_name]))
        elif kind == "node" and label:
            nodes.append(_node_from_section(label, parser[section_name]))
        elif kind == "fault" and label:
            faults.append(_fault_from_section(label, parser[section_name]))
        else:
            raise ConfigError(f"{source}: unknown section [{section_name}]")

    duration = _section_int(sim, "duration_slots", spec.slots_per_epoch * 2, "simulation")
    run_seed = _section_int(sim, "seed", 0, "simulation") if seed is None else seed
    config = SimConfig(
        name=sim.get("name", Path(source).stem),
        spec=spec,
        regions=tuple(regions),
        nodes=tuple(nodes),
        duration_slots=duration or 0,
        seed=run_seed or 0,
    )
    for fault in faults:
        config = replace(config, faults=config.faults + (fault,))
    return config


def load_scenario(
    path: str | Path,
    *,
    seed: Optional[int] = None,
    spec_overrides: Optional[Mapping[str, str]] = None,
) -> SimConfig:
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {file_path}: {exc}") from exc
    config = parse_scenario(text, str(file_path), seed=seed, spec_overrides=spec_overrides)
    logger.info(
        "Loaded scenario %s: %s nodes, %s validators, %s slots.",
        config.name,
        len(config.nodes),
        config.validator_count,
        config.duration_slots,
    )
    return config


def simple_config(
    regions: Sequence[RegionProfile],
    nodes: Sequence[NodeSpec],
    duration_slots: int,
    *,
    seed: int = 0,
    spec: ChainSpec = DEFAULT_SPEC,
    name: str = "adhoc",
) -> SimConfig:
    return SimConfig(name=name, spec=spec, regions=tuple(regions), nodes=tuple(nodes), duration_slots=duration_slots, seed=seed)
