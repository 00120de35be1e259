#!/usr/bin/env python3
"""
slotwatch command line.

    python -m backend.app.cli simulate presets/four-regions.cfg --seed 7
    python -m backend.app.cli report --kind missed_flags --log runs/four-regions-7.log

Exit codes: 0 success, 2 configuration or usage error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from .config import settings
from .errors import ConfigError, DataError, SlotwatchError
from .logging_setup import configure_logging
from .record_log import RecordLog
from .reports import REPORT_KINDS, ReportSpec, export_csv, report

logger = logging.getLogger(__name__)


def _default_log(name: str, seed: int) -> Path:
    return Path(settings.log_dir) / f"{name}-{seed}.log"


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


# --- subcommands ------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    from .services.chain import parse_overrides
    from .services.pipeline import ingest_simulation
    from .services.scenario import load_scenario
    from .services.simulator import run

    config = load_scenario(args.scenario, seed=args.seed, spec_overrides=parse_overrides(args.spec_set))
    out = Path(args.out) if args.out else _default_log(config.name, config.seed)
    result = run(config)
    summary = ingest_simulation(result, RecordLog(out), with_block_scores=not args.no_block_scores)
    payload = summary.as_dict()
    payload.update(
        {
            "log": str(out),
            "scenario": config.name,
            "seed": config.seed,
            "slots": config.duration_slots,
            "blocks": len(result.truth.blocks),
            "missed_slots": len(result.truth.missed_slots),
            "reorgs": len(result.truth.reorgs),
        }
    )
    _print_json(payload)
    return 0


def cmd_collect(args: argparse.Namespace) -> int:
    from .collector import Collector
    from .services.beacon_client import load_endpoints
    from .services.chain import load_chain_spec, parse_overrides

    endpoints = load_endpoints(args.endpoints)
    spec = load_chain_spec(args.spec, parse_overrides(args.spec_set))
    collector = Collector(endpoints, spec=spec)
    summary = collector.run(RecordLog(args.out), duration_slots=args.duration)
    payload = summary.as_dict()
    payload["log"] = args.out
    _print_json(payload)
    return 0


def _emit_report(spec: ReportSpec, log_path: str, csv_path: Optional[str] = None) -> int:
    rendered = report(spec, RecordLog(log_path))
    sys.stdout.write(rendered.render())
    if csv_path:
        path = Path(csv_path)
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rendered.csv, encoding="utf-8", newline="\n")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    return _emit_report(ReportSpec("block_scores", group_by=args.group_by), args.log, args.csv)


def cmd_rewards(args: argparse.Namespace) -> int:
    return _emit_report(ReportSpec("rewards_by_location", group_by=args.group_by), args.log, args.csv)


def cmd_report(args: argparse.Namespace) -> int:
    spec = ReportSpec(
        args.kind,
        group_by=args.group_by,
        from_slot=args.from_slot,
        to_slot=args.to_slot,
        fmt=args.format,
    )
    return _emit_report(spec, args.log, args.csv)


def cmd_replay(args: argparse.Namespace) -> int:
    from .services.pipeline import ingest_replay

    source = RecordLog(args.log)
    if args.into:
        summary = ingest_replay(source, RecordLog(args.into))
        payload = summary.as_dict()
        payload["log"] = args.into
    else:
        read = source.read(verify=args.verify)
        payload = {
            "log": args.log,
            "counts": read.counts(),
            "records": len(read.records),
            "duplicates": read.duplicates,
            "verified": bool(args.verify),
        }
    _print_json(payload)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    written = export_csv(RecordLog(args.log), args.dir)
    _print_json({kind: str(path) for kind, path in written.items()})
    return 0


def serve_nodes(result, *, host: str, base_port: int, speed: float) -> list[tuple[object, threading.Thread]]:
    """Start one uvicorn server per simulated node on consecutive ports."""
    import uvicorn

    from .main import create_app
    from .services.sim_node import SimNode

    servers = []
    for offset, profile in enumerate(result.profiles()):
        node = SimNode(result, profile.node_id, speed=speed)
        config = uvicorn.Config(create_app(node), host=host, port=base_port + offset, log_level="warning")
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True, name=f"serve-{profile.node_id}")
        thread.start()
        servers.append((server, thread))
        print(f"http://{host}:{base_port + offset} {profile.node_id} {profile.region} {profile.client}")
    return servers


def cmd_serve(args: argparse.Namespace) -> int:
    from .services.chain import parse_overrides
    from .services.scenario import load_scenario
    from .services.simulator import run

    if args.speed < 0:
        raise ConfigError("--speed must be non-negative")
    if not 1 <= args.base_port <= 65535:
        raise ConfigError("--base-port must be a valid TCP port")
    config = load_scenario(args.scenario, seed=args.seed, spec_overrides=parse_overrides(args.spec_set))
    result = run(config)
    servers = serve_nodes(result, host=args.host, base_port=args.base_port, speed=args.speed)
    try:
        for _, thread in servers:
            thread.join()
    except KeyboardInterrupt:
        for server, _ in servers:
            server.should_exit = True  # type: ignore[attr-defined]
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotwatch", description="Consensus-layer performance toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run a scenario and write its records.")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="Record log (default: $SW_LOG_DIR/<scenario>-<seed>.log)")
    p.add_argument("--spec-set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--no-block-scores", action="store_true", help="Skip per-node candidate scoring.")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("collect", help="Collect telemetry from live beacon nodes.")
    p.add_argument("--endpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=int, default=None, metavar="SLOTS")
    p.add_argument("--spec", default=None, help="Chain spec file (key = value).")
    p.add_argument("--spec-set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_collect)

    for name, func, text in (
        ("score", cmd_score, "Block score summary."),
        ("rewards", cmd_rewards, "Achieved reward against the maximum."),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--log", required=True)
        p.add_argument("--group-by", choices=("location", "client", "node"), default="location")
        p.add_argument("--csv", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="Render one report kind.")
    p.add_argument("--kind", required=True, choices=REPORT_KINDS)
    p.add_argument("--log", required=True)
    p.add_argument("--csv", default=None, help="Also write the CSV rendering here.")
    p.add_argument("--group-by", choices=("location", "client", "node"), default="location")
    p.add_argument("--from-slot", type=int, default=None)
    p.add_argument("--to-slot", type=int, default=None)
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="Read a log back, optionally checking checksums.")
    p.add_argument("--log", required=True)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--into", default=None, help="Append the records to another log, keeping ids.")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve", help="Serve simulated nodes over the beacon API.")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--base-port", type=int, default=5052)
    p.add_argument("--speed", type=float, default=1.0, help="Simulated ms per wall ms; 0 serves everything at once.")
    p.add_argument("--spec-set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="Write one CSV per record type.")
    p.add_argument("--log", required=True)
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DataError as exc:
        logger.error("Data error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SlotwatchError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure in %s.", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
