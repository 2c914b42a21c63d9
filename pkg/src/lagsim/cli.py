"""Command line entry point: ``lagsim run ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .core import LagError
from .metrics import write_report
from .scenario import INJECT_MODES, PRESETS, run_scenario
from .simnet import BandwidthMode, load_topology_spec


def _link_id(text: str) -> int:
    value = text[3:] if text.startswith("lag") else text
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid link id {text!r}") from None


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lagsim", description="Simulate LACP link aggregation failover.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario and write its report")
    r.add_argument("--scenario", choices=sorted(PRESETS), default="topo2")
    r.add_argument("--links", type=int)
    r.add_argument("--clients", type=int)
    r.add_argument("--kill-link", type=_link_id, help="link number to kill, 0 for none")
    r.add_argument("--kill-at", type=float, help="kill time in seconds")
    r.add_argument("--duration", type=float)
    r.add_argument("--mode", choices=[m.value for m in BandwidthMode])
    r.add_argument("--inject", choices=INJECT_MODES)
    r.add_argument("--inject-count", type=int, help="duplicates per re-forwarded conversation")
    r.add_argument("--seed", type=_seed, default=0)
    r.add_argument("--out", required=True, help="report directory")
    r.add_argument("--bulk", action="store_true", help="add a saturating bulk flow to every client")
    r.add_argument("--detection", choices=["first", "mii", "lacp"])
    r.add_argument("--poll-interval", type=float)
    r.add_argument("--config", help="key = value topology file; explicit flags win")
    r.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {}
    try:
        if args.config:
            spec = load_topology_spec(args.config)
            overrides.update(
                links=spec.lag_width,
                clients=spec.client_count,
                mode=spec.bandwidth_mode,
                detection=spec.detection,
                poll_interval=spec.poll_interval,
                link_capacity=spec.link_capacity,
                client_macs=spec.client_macs,
            )
        flags = dict(
            links=args.links,
            clients=args.clients,
            kill_link=args.kill_link,
            kill_at=args.kill_at,
            duration=args.duration,
            mode=args.mode,
            inject=args.inject,
            inject_count=args.inject_count,
            seed=args.seed,
            detection=args.detection,
            poll_interval=args.poll_interval,
            bulk=args.bulk or None,
        )
        overrides.update({k: v for k, v in flags.items() if v is not None})
        report = run_scenario(args.scenario, **overrides)
        write_report(report, args.out)
    except LagError as exc:
        print(f"lagsim: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(report.summary_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
