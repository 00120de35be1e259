#!/usr/bin/env python3
"""
Rebuild the bundled fixture log and the golden report outputs under
backend/tests/fixtures/. Review the diff before committing.

    python scripts/regenerate_golden.py
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from backend.app.logging_setup import configure_logging  # noqa: E402
from backend.app.record_log import RecordLog  # noqa: E402
from backend.app.reports import REPORT_KINDS, ReportSpec, report  # noqa: E402
from backend.app.services.pipeline import ingest_simulation  # noqa: E402
from backend.app.services.scenario import load_scenario  # noqa: E402
from backend.app.services.simulator import run as simulate  # noqa: E402

FIXTURES = REPO_ROOT / "backend" / "tests" / "fixtures"
PRESET = REPO_ROOT / "presets" / "faults.cfg"


def main() -> None:
    parser = argparse.ArgumentParser(description="Regenerate the fixture log and golden reports.")
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--out", default=str(FIXTURES))
    args = parser.parse_args()

    configure_logging()
    out = Path(args.out)
    golden = out / "golden"
    golden.mkdir(parents=True, exist_ok=True)
    log_path = out / "fixture.log"
    if log_path.exists():
        log_path.unlink()

    result = simulate(load_scenario(PRESET, seed=args.seed))
    log = RecordLog(log_path)
    summary = ingest_simulation(result, log)
    manifest = {"scenario": result.config.name, "seed": args.seed, "counts": summary.counts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    for kind in REPORT_KINDS:
        rendered = report(ReportSpec(kind), log)
        (golden / f"{kind}.txt").write_text(rendered.table, encoding="utf-8", newline="\n")
        (golden / f"{kind}.csv").write_text(rendered.csv, encoding="utf-8", newline="\n")
        print(f"wrote {kind}")
    print(f"Fixture log: {log_path} ({summary.appended} records)")


if __name__ == "__main__":
    main()
