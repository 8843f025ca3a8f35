"""Command line entry point: ``fedlop run|sweep|coordinator|agent|gen-data``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex

log = logging.getLogger("fedlop")


def _parse_values(text: str, axis: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "strategy":
        return items
    try:
        return [int(v) for v in items]
    except ValueError:
        raise ex.ConfigError(f"values: {axis} needs integers, got {text!r}") from None


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ex.ConfigError(f"--connect: expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def cmd_run(args) -> int:
    return ex.run_experiment(args.config)


def cmd_coordinator(args) -> int:
    return ex.run_experiment(args.config, mode="coordinator")


def cmd_sweep(args) -> int:
    cfg = ex.load_config(args.config)
    values = _parse_values(args.values, args.axis)
    strategies = args.strategies.split(",") if args.strategies else None
    rows = ex.run_sweep(cfg, args.axis, values, strategies)
    for r in rows:
        print(f"{r['axis']}={r['value']} {r['strategy']}: {r['mean_accuracy']:.4f} ({r['status']})")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_agent(args) -> int:
    from .transport import agent_run
    cfg = ex.load_config(args.config)
    if not 0 <= args.client_id < cfg.n_clients:
        raise ex.ConfigError(f"--client-id: must lie in [0, {cfg.n_clients})")
    address = _address(args.connect) if args.connect else (cfg.host, cfg.port)
    client = ex.make_client(cfg, args.client_id)
    return agent_run(client, address, retries=args.retries, retry_delay=args.retry_delay)


def cmd_gen_data(args) -> int:
    cfg = ex.load_config(args.config)
    for p in ex.gen_data(cfg):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedlop", description="Federated learning-outcome prediction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run one experiment from a JSON config")
    s.add_argument("config")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="repeat an experiment over one axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma separated list")
    s.add_argument("--strategies", help="comma separated strategies for numeric axes")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("coordinator", help="serve a distributed run")
    s.add_argument("config")
    s.set_defaults(func=cmd_coordinator)

    s = sub.add_parser("agent", help="join a distributed run as one client")
    s.add_argument("config")
    s.add_argument("--client-id", type=int, required=True)
    s.add_argument("--connect", help="host:port of the coordinator")
    s.add_argument("--retries", type=int, default=3)
    s.add_argument("--retry-delay", type=float, default=1.0)
    s.set_defaults(func=cmd_agent)

    s = sub.add_parser("gen-data", help="write synthetic per-client CSV files")
    s.add_argument("config")
    s.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"fedlop: invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("failed")
        print(f"fedlop: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
