from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

PRESETS = Path(__file__).resolve().parents[2] / "presets"

SCENARIO = textwrap.dedent(
    """\
    [simulation]
    name = sample
    seed = 5
    duration_slots = 16

    [chain]
    slots_per_epoch = 8

    [region near]
    median_ms = 1400
    sigma = 0.45
    processing_ms = 15
    from.far = 2600 0.5 100

    [region far]
    median_ms = 2500     # heavy tail
    sigma = 0.55

    [node near-1]
    region = near
    client = lighthouse
    validators = 40
    peer_count = 100

    [node far-1]
    region = far
    client = teku
    validators = 24

    [fault gap]
    kind = stream_drop
    node = far-1
    first_slot = 4
    last_slot = 6
    """
)


def test_parse_scenario_sections():
    from backend.app.services.scenario import LatencyModel, parse_scenario

    config = parse_scenario(SCENARIO)
    assert config.name == "sample"
    assert config.seed == 5
    assert config.duration_slots == 16
    assert config.spec.slots_per_epoch == 8
    assert config.validator_count == 64

    near = config.region_map["near"]
    assert near.latency_from("far") == LatencyModel(2600, 0.5, 100)
    assert near.latency_from("near") == LatencyModel(1400, 0.45, 0)
    assert config.region_map["far"].inbound.median_ms == 2500

    first, second = config.profiles()
    assert (first.first_validator, first.validators) == (0, 40)
    assert (second.first_validator, second.validators) == (40, 24)
    assert first.processing_ms == 15 and first.peer_count == 100 and first.load_factor == 2.0
    assert second.peer_count == 50

    (fault,) = config.faults
    assert fault.kind == "stream_drop" and fault.covers(5) and not fault.covers(7)


def test_seed_and_spec_overrides():
    from backend.app.services.scenario import parse_scenario

    config = parse_scenario(SCENARIO, seed=99, spec_overrides={"seconds_per_slot": "10"})
    assert config.seed == 99
    assert config.spec.seconds_per_slot == 10
    assert config.spec.slots_per_epoch == 8
    assert config.with_seed(3).seed == 3


@pytest.mark.parametrize(
    "old, new",
    [
        ("region = near\n", "region = nowhere\n"),
        ("duration_slots = 16", "duration_slots = 4"),
        ("kind = stream_drop", "kind = meteor"),
        ("last_slot = 6", "last_slot = 40"),
        ("validators = 40", "validators = -1"),
        ("median_ms = 1400", "median_ms = fast"),
        ("[node far-1]", "[node near-1]"),
        ("[fault gap]", "[mystery gap]"),
        ("from.far = 2600 0.5 100", "from.moon = 2600 0.5"),
    ],
)
def test_invalid_scenarios_raise_config_error(old, new):
    from backend.app.errors import ConfigError
    from backend.app.services.scenario import parse_scenario

    assert old in SCENARIO
    with pytest.raises(ConfigError):
        parse_scenario(SCENARIO.replace(old, new, 1))


def test_missing_simulation_section():
    from backend.app.errors import ConfigError
    from backend.app.services.scenario import load_scenario, parse_scenario

    with pytest.raises(ConfigError):
        parse_scenario("[region a]\nmedian_ms = 1\n")
    with pytest.raises(ConfigError):
        load_scenario(PRESETS / "does-not-exist.cfg")


def test_inject_fault_checks_overlap():
    from backend.app.errors import ConfigError
    from backend.app.services.scenario import inject_fault, parse_scenario

    config = parse_scenario(SCENARIO)
    config = inject_fault(config, "node_down", "near-1", (2, 3))
    assert [f.kind for f in config.faults_for("near-1", "node_down")] == ["node_down"]
    with pytest.raises(ConfigError):
        inject_fault(config, "node_down", "near-1", (3, 5))
    with pytest.raises(ConfigError):
        inject_fault(config, "node_down", "ghost", (3, 5))
    # Same window, different kind is fine.
    inject_fault(config, "clock_skew", "near-1", (2, 3), offset_ms=-100)


@pytest.mark.parametrize("preset", ["four-regions.cfg", "two-regions.cfg", "ideal.cfg", "faults.cfg"])
def test_presets_load(preset):
    from backend.app.services.scenario import load_scenario

    config = load_scenario(PRESETS / preset)
    assert config.validator_count > 0
    assert config.duration_slots >= config.spec.slots_per_epoch


def test_four_region_preset_calibration():
    from backend.app.services.scenario import load_scenario

    config = load_scenario(PRESETS / "four-regions.cfg")
    regions = config.region_map
    assert set(regions) == {"frankfurt", "new-york", "singapore", "sydney"}
    assert regions["sydney"].inbound.median_ms > regions["frankfurt"].inbound.median_ms
