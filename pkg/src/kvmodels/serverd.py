"""Server executable.

Exit codes: 0 clean shutdown, 2 configuration error, 3 bind error.
"""
from __future__ import annotations

import argparse
import logging
import signal
import sys
import time
from dataclasses import dataclass

from . import netio
from .datastore import DEFAULT_BUCKETS, Store
from .engine import ConfigError, ModelConfig, ModelKind, Server
from .protocol import DEFAULT_VALUE_CAP

EXIT_OK = 0
EXIT_CRASH = 1
EXIT_CONFIG = 2
EXIT_BIND = 3


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ServerCliConfig:
    model: ModelConfig
    endpoint: netio.Endpoint
    bucket_count: int = DEFAULT_BUCKETS
    idle_timeout: float = netio.DEFAULT_IDLE_TIMEOUT
    value_cap: int = DEFAULT_VALUE_CAP
    stats_interval: float = 1.0
    log_level: str = "WARNING"

    @property
    def net_threads(self):
        return self.model.n_network

    @property
    def payload_threads(self):
        return self.model.n_payload


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvmodels-server", description="In-memory key-value cache server.")
    p.add_argument("--model", required=True, choices=[k.value for k in ModelKind])
    p.add_argument("--net-threads", type=int)
    p.add_argument("--payload-threads", type=int)
    p.add_argument("--endpoint", default="unix:/tmp/kvmodels.sock")
    p.add_argument("--buckets", type=int, default=DEFAULT_BUCKETS)
    p.add_argument("--idle-timeout", type=float, default=netio.DEFAULT_IDLE_TIMEOUT)
    p.add_argument("--value-cap", type=int, default=DEFAULT_VALUE_CAP)
    p.add_argument("--stats-interval", type=float, default=1.0)
    p.add_argument("--log-level", default="WARNING")
    return p


def parse_cli(argv) -> ServerCliConfig:
    """Parse flags into a validated config; raises UsageError naming the rule broken."""
    args = build_parser().parse_args(argv)
    try:
        model = ModelConfig.resolve(args.model, args.net_threads, args.payload_threads)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    try:
        endpoint = netio.parse_endpoint(args.endpoint)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.buckets <= 0 or args.buckets & (args.buckets - 1):
        raise UsageError("--buckets must be a positive power of two")
    if args.idle_timeout <= 0 or args.stats_interval < 0:
        raise UsageError("--idle-timeout must be positive and --stats-interval non-negative")
    if not 0 <= args.value_cap <= 0xFFFFFFFF:
        raise UsageError("--value-cap must fit in 32 bits")
    return ServerCliConfig(model, endpoint, args.buckets, args.idle_timeout, args.value_cap,
                           args.stats_interval, args.log_level.upper())


def format_stats(server: Server, t0: float) -> str:
    c = server.counters()
    keys = ("requests", "records", "connections", "accepted", "jobs_dispatched",
            "queue_transfers", "handoffs", "drained_bytes")
    fields = [f"t={time.monotonic() - t0:.1f}", f"model={server.config.kind.value}"]
    fields += [f"{k}={c.get(k, 0)}" for k in keys]
    return "stats " + " ".join(fields)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_cli(argv)
    except UsageError as e:
        print(f"kvmodels-server: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg.log_level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    store = Store(cfg.bucket_count, value_cap=cfg.value_cap)
    server = Server(cfg.model, cfg.endpoint, store, idle_timeout=cfg.idle_timeout,
                    value_cap=cfg.value_cap)
    try:
        server.start(accept_in_thread=False)
    except OSError as e:
        print(f"kvmodels-server: cannot bind {cfg.endpoint}: {e.strerror or e}", file=sys.stderr)
        return EXIT_BIND
    print(f"topology {server.topology.describe()} endpoint={server.endpoint}",
          file=sys.stderr, flush=True)
    t0 = time.monotonic()
    if cfg.stats_interval > 0:
        server.add_timer(cfg.stats_interval,
                         lambda: print(format_stats(server, t0), file=sys.stderr, flush=True))

    def on_signal(signum, frame):
        server.request_shutdown()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    server.run_accept_loop()
    print(format_stats(server, t0), file=sys.stderr, flush=True)
    return EXIT_CRASH if server._crashed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
