#!/usr/bin/env python3
"""
Seed sweep over the two-region preset: the far region should earn less,
miss more head votes and see at least as many reorgs as the near region.

    python scripts/stress_test.py --seeds 20 --slots 1000
"""
from __future__ import annotations

import argparse
import sys
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from backend.app.logging_setup import configure_logging  # noqa: E402
from backend.app.services.duties import aggregate_stats  # noqa: E402
from backend.app.services.scenario import load_scenario  # noqa: E402
from backend.app.services.simulator import run as simulate  # noqa: E402

PRESET = REPO_ROOT / "presets" / "two-regions.cfg"


def run_seed(seed: int, slots: int | None) -> dict:
    config = load_scenario(PRESET, seed=seed)
    if slots:
        config = replace(config, duration_slots=slots)
    result = simulate(config)
    stats = aggregate_stats(result.truth.performances, "location")
    reorgs = Counter(r.location for r in result.truth.reorgs)
    near, far = stats.row("near"), stats.row("far")
    return {
        "seed": seed,
        "near_pct": near.achieved_pct,
        "far_pct": far.achieved_pct,
        "near_head": near.missed_head_ratio,
        "far_head": far.missed_head_ratio,
        "near_reorgs": reorgs.get("near", 0),
        "far_reorgs": reorgs.get("far", 0),
    }


def scenario_latency_ordering(rows: list[dict], required: int) -> None:
    reward_ok = sum(1 for r in rows if r["far_pct"] < r["near_pct"])
    head_ok = sum(1 for r in rows if r["far_head"] > r["near_head"])
    assert reward_ok >= required, f"far below near in only {reward_ok}/{len(rows)} seeds"
    assert head_ok >= required, f"far misses more head votes in only {head_ok}/{len(rows)} seeds"
    print(f"Latency ordering OK ({reward_ok}/{len(rows)} reward, {head_ok}/{len(rows)} head)")


def scenario_reorg_ordering(rows: list[dict], required: int) -> None:
    ok = sum(1 for r in rows if r["far_reorgs"] >= r["near_reorgs"])
    assert ok >= required, f"far reorgs >= near in only {ok}/{len(rows)} seeds"
    print(f"Reorg ordering OK ({ok}/{len(rows)})")


def main() -> None:
    parser = argparse.ArgumentParser(description="Seed sweep over the two-region preset.")
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--slots", type=int, default=1000)
    parser.add_argument("--allowed-failures", type=int, default=1)
    args = parser.parse_args()

    configure_logging()
    started = time.monotonic()
    rows = []
    for seed in range(1, args.seeds + 1):
        row = run_seed(seed, args.slots)
        rows.append(row)
        print(
            f"seed {seed:>3}: near {row['near_pct']:.1f}% far {row['far_pct']:.1f}% "
            f"head-miss {100 * row['near_head']:.1f}/{100 * row['far_head']:.1f} "
            f"reorgs {row['near_reorgs']}/{row['far_reorgs']}"
        )
    required = len(rows) - args.allowed_failures
    scenario_latency_ordering(rows, required)
    scenario_reorg_ordering(rows, required)
    print(f"All stress tests passed in {time.monotonic() - started:.1f}s.")


if __name__ == "__main__":
    main()
