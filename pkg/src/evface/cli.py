"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

from .bench import (
    DatasetError,
    load_dataset,
    read_embedding_file,
    render_jsonl,
    render_table,
    run_benchmark,
    sweep_parameters,
)
from .embedding import DEFAULT_K, DEFAULT_THRESHOLD, knn_fit
from .meter import DEFAULT_MODBUS_PORT, DEFAULT_RATED_POWER_W, DEFAULT_VOLTAGE_V, Meter, ModbusTCPServer, TcpMeterLink
from .server import DEFAULT_SESSION_CAP_WH, AuthHTTPServer, AuthService
from .store import EnrollmentStore, StoreError
from .synth import SeparationError, generate_dataset

log = logging.getLogger("evface")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _count_spec(text: str):
    """``3`` or an inclusive range ``1-2``."""
    lo, sep, hi = text.partition("-")
    if sep:
        a, b = _positive_int(lo), _positive_int(hi)
        if b < a:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return (a, b)
    return _positive_int(text)


def _grid(kind):
    def parse(text: str):
        return [kind(part) for part in text.split(",") if part.strip()]
    return parse


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from None


def _env(name: str, default):
    return os.environ.get(f"EVFACE_{name}", default)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evface", description="Face-embedding authentication for EV charging.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the authentication server")
    p.add_argument("--store", type=Path, default=Path(_env("STORE", "store.json")))
    p.add_argument("--listen", type=_address, default=_env("LISTEN", "127.0.0.1:8080"))
    p.add_argument("--k", type=_positive_int, default=_env("K", str(DEFAULT_K)))
    p.add_argument("--threshold", type=_positive_float, default=_env("THRESHOLD", str(DEFAULT_THRESHOLD)))
    p.add_argument("--session-cap", type=_positive_float, default=_env("SESSION_CAP", str(DEFAULT_SESSION_CAP_WH)))
    p.add_argument("--admin-token", default=_env("ADMIN_TOKEN", None))

    p = sub.add_parser("meter", help="run the simulated Modbus-TCP energy meter")
    p.add_argument("--listen", type=_address, default=("127.0.0.1", DEFAULT_MODBUS_PORT))
    p.add_argument("--load", type=_non_negative_float, default=0.0, help="dummy load in W")
    p.add_argument("--tick", type=_positive_float, default=1.0, help="seconds per tick")
    p.add_argument("--voltage", type=_positive_float, default=DEFAULT_VOLTAGE_V)
    p.add_argument("--rated-power", type=_positive_float, default=DEFAULT_RATED_POWER_W)
    p.add_argument("--watchdog", type=_positive_float, default=None, help="open contactor after this many s without a request")

    p = sub.add_parser("station", help="run the edge station against live services or a scenario")
    p.add_argument("--scenario", type=Path, help="simulate a scenario document in-process")
    p.add_argument("--server", default="http://127.0.0.1:8080")
    p.add_argument("--meter", type=_address, default=("127.0.0.1", DEFAULT_MODBUS_PORT))
    p.add_argument("--embedding", type=Path, help=".emb file presented as the face")
    p.add_argument("--station-id", default="station-1")
    p.add_argument("--poll", type=_positive_float, default=1.0)
    p.add_argument("--replay-log", type=Path, help="default: station-replay.jsonl (live mode), temp file (scenario)")
    p.add_argument("--max-duration", type=_positive_float, default=None, help="unplug after this many s")

    p = sub.add_parser("enroll", help="enroll a user through the admin endpoint")
    p.add_argument("--server", default="http://127.0.0.1:8080")
    p.add_argument("--name", required=True)
    p.add_argument("--embedding", type=Path, action="append", required=True, help="repeat for several")
    p.add_argument("--quota", type=_non_negative_float, required=True, help="Wh")
    p.add_argument("--account-type", default="standard", choices=("standard", "premium", "staff"))
    p.add_argument("--admin-token", default=_env("ADMIN_TOKEN", None))

    p = sub.add_parser("bench", help="benchmark the KNN recognizer on a train/test split")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K)
    p.add_argument("--threshold", type=_positive_float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", type=Path, help="JSON-lines report (default: stdout after the table)")

    p = sub.add_parser("sweep", help="grid-search k and threshold")
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--k-grid", type=_grid(_positive_int), default=[1, 3, 5, 7])
    p.add_argument("--threshold-grid", type=_grid(_positive_float), default=[0.3, 0.6, 0.9, 1.2])
    p.add_argument("--out", type=Path)

    p = sub.add_parser("gen-dataset", help="write a synthetic labelled embedding dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--identities", type=_positive_int, default=15)
    p.add_argument("--train", type=_count_spec, default=(1, 2), help="per identity, N or LO-HI")
    p.add_argument("--test", type=_count_spec, default=3)
    p.add_argument("--sigma", type=_non_negative_float, default=0.05)
    p.add_argument("--min-separation", type=_non_negative_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    return parser


# -- subcommands -----------------------------------------------------------


def _emit_reports(reports, best, out: Optional[Path]) -> None:
    print(render_table(reports, best))
    lines = render_jsonl(reports)
    if out is None:
        sys.stdout.write(lines)
    else:
        out.write_text(lines, encoding="utf-8")


def cmd_bench(args) -> int:
    train, test = load_dataset(args.train), load_dataset(args.test)
    model = knn_fit(train.entries, k=args.k, threshold=args.threshold)
    report = run_benchmark(model, test, parameters=(args.k, args.threshold))
    _emit_reports([report], None, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.k_grid or not args.threshold_grid:
        print("evface sweep: grids must be non-empty", file=sys.stderr)
        return EXIT_USAGE
    train, test = load_dataset(args.train), load_dataset(args.test)
    result = sweep_parameters(train, test, args.k_grid, args.threshold_grid)
    _emit_reports([cell[2] for cell in result.grid], result.best, args.out)
    k, t, rep = result.best_cell
    log.info("best k=%d threshold=%s accuracy=%.2f", k, t, rep.accuracy_percent)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    try:
        ds = generate_dataset(
            args.out, identities=args.identities, train=args.train, test=args.test,
            sigma=args.sigma, min_separation=args.min_separation, seed=args.seed,
            overwrite=args.overwrite,
        )
    except SeparationError as exc:
        print(f"evface gen-dataset: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps({
        "train_dir": str(ds.train_dir), "test_dir": str(ds.test_dir),
        "labels": len(ds.labels), "train_files": ds.train_count, "test_files": ds.test_count,
    }))
    return EXIT_OK


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


def cmd_serve(args) -> int:
    try:
        store = EnrollmentStore(args.store, k=args.k, threshold=args.threshold)
    except StoreError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    service = AuthService(store, session_cap_wh=args.session_cap, admin_token=args.admin_token)
    try:
        httpd = AuthHTTPServer(args.listen, service)
    except OSError as exc:
        log.error("cannot listen on %s:%s: %s", *args.listen, exc)
        return EXIT_FAILURE
    log.info("serving on %s store=%s users=%d labels=%d", httpd.url, args.store, len(store), len(store.model.labels))
    httpd.start_background()
    try:
        _wait_for_signal()
    finally:
        httpd.shutdown()
        httpd.server_close()
        store.flush()
        log.info("server stopped; store flushed to %s", args.store)
    return EXIT_OK


def cmd_meter(args) -> int:
    meter = Meter(voltage_v=args.voltage, rated_power_w=args.rated_power, comm_timeout_s=args.watchdog)
    try:
        meter.set_load(args.load)
    except ValueError as exc:
        print(f"evface meter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        server = ModbusTCPServer(args.listen, meter)
    except OSError as exc:
        log.error("cannot listen on %s:%s: %s", *args.listen, exc)
        return EXIT_FAILURE
    server.start_background()
    log.info("meter on %s:%s load_w=%s tick_s=%s", *args.listen, args.load, args.tick)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(args.tick):
        meter.tick(args.tick)
    server.shutdown()
    server.server_close()
    return EXIT_OK


def cmd_station(args) -> int:
    from .client import HttpAuthClient
    from .sim import ScenarioError, load_scenario
    from .station import FixtureFileSource, RealClock, ReplayLog, SessionState, Station, StationConfig

    if args.scenario is not None:
        try:
            sim, events, until = load_scenario(args.scenario, replay_path=args.replay_log)
            for line in sim.run_scenario(events, until, base_dir=args.scenario.parent):
                print(json.dumps(line))
        except (ScenarioError, DatasetError, ValueError) as exc:
            print(f"evface station: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(json.dumps({"summary": sim.summary()}))
        return EXIT_OK

    if args.embedding is None:
        print("evface station: --embedding or --scenario is required", file=sys.stderr)
        return EXIT_USAGE
    config = StationConfig(
        station_id=args.station_id, poll_interval=args.poll,
        server_address=args.server, meter_address=f"{args.meter[0]}:{args.meter[1]}",
    )
    station = Station(
        config, HttpAuthClient(args.server), TcpMeterLink(*args.meter), RealClock(),
        ReplayLog(args.replay_log or "station-replay.jsonl"),
    )
    replayed = station.replay_pending()
    if replayed:
        log.info("replayed %d queued session reports", replayed)
    unplug = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: unplug.set())

    outcome = station.begin_session(FixtureFileSource(args.embedding))
    print(json.dumps({"event": "authenticate", "state": outcome.state.value,
                      "outcome": type(outcome.response).__name__ if outcome.response else outcome.error}))
    if outcome.state is not SessionState.CHARGING:
        return EXIT_OK if outcome.state is SessionState.IDLE else EXIT_FAILURE
    started = time.monotonic()
    while station.state is SessionState.CHARGING:
        if unplug.wait(args.poll) or (args.max_duration and time.monotonic() - started >= args.max_duration):
            station.end_session("completed")
            break
        station.poll_and_enforce()
    s = station.session
    print(json.dumps({"event": "session_end", "state": s.state.value, "session_id": s.session_id,
                      "consumed_wh": s.consumed_wh, "reported": s.reported,
                      "remaining_quota_wh": s.ack.remaining_quota_wh if s.ack else None}))
    return EXIT_FAILURE if s.state is SessionState.FAULTED else EXIT_OK


def cmd_enroll(args) -> int:
    from .client import HttpAuthClient, ServerUnavailable

    embeddings = [read_embedding_file(p) for p in args.embedding]
    try:
        status, body = HttpAuthClient(args.server).enroll(
            args.name, embeddings, args.quota, args.account_type, args.admin_token
        )
    except ServerUnavailable as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    print(json.dumps({"status": status, **(body if isinstance(body, dict) else {})}))
    if status == 201:
        return EXIT_OK
    return EXIT_USAGE if status == 400 else EXIT_FAILURE


COMMANDS = {
    "serve": cmd_serve,
    "meter": cmd_meter,
    "station": cmd_station,
    "enroll": cmd_enroll,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "gen-dataset": cmd_gen_dataset,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except DatasetError as exc:
        print(f"evface {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
