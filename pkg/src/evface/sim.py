"""Desk-scale simulation: server, meter and station on one simulated clock.

Scenario documents are JSON::

    {
      "users":  [{"name": "alice", "embeddings": ["alice.emb"], "quota_wh": 5000,
                  "account_type": "standard"}],
      "config": {"poll_interval": 1.0, "session_cap_wh": 2000},
      "events": [{"t": 0, "event": "set-load", "watts": 1000},
                 {"t": 0, "event": "present-face", "file": "alice.emb"},
                 {"t": 1440, "event": "unplug"}],
      "until": 3600
    }

Event kinds: present-face, set-load, unplug, kill-server, restore-server,
kill-meter, restore-meter. Embedding paths are relative to the scenario file.
"""

from __future__ import annotations

import json
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .bench import read_embedding_file
from .client import LocalAuthClient
from .embedding import DEFAULT_K, DEFAULT_THRESHOLD
from .meter import DEFAULT_RATED_POWER_W, LocalMeterLink, Meter
from .server import DEFAULT_SESSION_CAP_WH, AuthService
from .station import (
    AuthOutcome,
    EmbeddingSource,
    FixtureFileSource,
    ReplayLog,
    ScriptedSource,
    SessionState,
    SimClock,
    Station,
    StationConfig,
)
from .store import EnrollmentStore

log = logging.getLogger(__name__)

EVENT_KINDS = (
    "present-face", "set-load", "unplug",
    "kill-server", "restore-server", "kill-meter", "restore-meter",
)
# Meter watchdog, in station poll intervals.
WATCHDOG_POLLS = 5


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioEvent:
    t: float
    kind: str
    args: dict = field(default_factory=dict)


class Simulation:
    def __init__(
        self,
        store: Optional[EnrollmentStore] = None,
        station_config: StationConfig = StationConfig(),
        session_cap_wh: float = DEFAULT_SESSION_CAP_WH,
        rated_power_w: float = DEFAULT_RATED_POWER_W,
        meter_watchdog_s: Optional[float] = None,
        replay_path: Optional[Path | str] = None,
    ) -> None:
        self.clock = SimClock()
        self.store = store if store is not None else EnrollmentStore()
        self.service = AuthService(
            self.store,
            session_cap_wh=session_cap_wh,
            rated_power_w=rated_power_w,
            meter_tick_s=station_config.poll_interval,
            clock=self.clock.now,
        )
        if meter_watchdog_s is None:
            meter_watchdog_s = WATCHDOG_POLLS * station_config.poll_interval
        self.meter = Meter(rated_power_w=rated_power_w, comm_timeout_s=meter_watchdog_s)
        self.clock.subscribe(self.meter.tick)
        self.server_link = LocalAuthClient(self.service)
        self.meter_link = LocalMeterLink(self.meter)
        if replay_path is None:
            replay_path = Path(tempfile.mkdtemp(prefix="evface-")) / "replay.jsonl"
        self.replay_log = ReplayLog(replay_path)
        self.station = Station(station_config, self.server_link, self.meter_link, self.clock, self.replay_log)
        self.trace: list[dict] = []
        self._next_poll: Optional[float] = None

    @property
    def now(self) -> float:
        return self.clock.now()

    def _note(self, event: str, **extra: Any) -> None:
        self.trace.append({"t": self.now, "event": event, "state": self.station.state.value, **extra})

    # -- driving -----------------------------------------------------------

    def present_face(self, source: EmbeddingSource) -> AuthOutcome:
        outcome = self.station.begin_session(source)
        if outcome.state is SessionState.CHARGING:
            self._next_poll = self.now + self.station.config.poll_interval
        self._note("present-face", outcome=type(outcome.response).__name__ if outcome.response else outcome.error)
        return outcome

    def unplug(self):
        ack = None
        if self.station.state is SessionState.CHARGING:
            ack = self.station.end_session("completed")
        self._note("unplug", consumed_wh=self.station.session.consumed_wh)
        return ack

    def set_load(self, watts: float) -> None:
        self.meter.set_load(watts)
        self._note("set-load", watts=watts)

    def kill_server(self) -> None:
        self.server_link.online = False
        self._note("kill-server")

    def restore_server(self) -> None:
        self.server_link.online = True
        self._note("restore-server")

    def kill_meter(self) -> None:
        self.meter_link.online = False
        self._note("kill-meter")

    def restore_meter(self) -> None:
        self.meter_link.online = True
        self._note("restore-meter")

    def run_until(self, t: float) -> SessionState:
        """Advance simulated time to ``t``, polling on the station's schedule."""
        while self.now < t:
            charging = self.station.state is SessionState.CHARGING
            if charging and self._next_poll is not None and self._next_poll <= t:
                step = max(0.0, self._next_poll - self.now)
                self.clock.advance(step)
                before = self.station.state
                self.station.poll_and_enforce()
                self._next_poll = max(self._next_poll + self.station.config.poll_interval, self.now)
                if self.station.state is not before:
                    self._note("state-change", consumed_wh=self.station.session.consumed_wh)
            else:
                self.clock.advance(t - self.now)
        return self.station.state

    def run_for(self, seconds: float) -> SessionState:
        return self.run_until(self.now + seconds)

    def apply(self, event: ScenarioEvent, base_dir: Path = Path(".")) -> None:
        kind, args = event.kind, event.args
        if kind == "present-face":
            if "file" in args:
                source: EmbeddingSource = FixtureFileSource(base_dir / args["file"])
            else:
                source = ScriptedSource([args["embedding"]])
            self.present_face(source)
        elif kind == "set-load":
            self.set_load(float(args["watts"]))
        elif kind == "unplug":
            self.unplug()
        elif kind == "kill-server":
            self.kill_server()
        elif kind == "restore-server":
            self.restore_server()
        elif kind == "kill-meter":
            self.kill_meter()
        elif kind == "restore-meter":
            self.restore_meter()
        else:
            raise ScenarioError(f"unknown event kind {kind!r}")

    def run_scenario(self, events: Sequence[ScenarioEvent], until: Optional[float] = None,
                     base_dir: Path = Path(".")) -> list[dict]:
        for event in sorted(events, key=lambda e: e.t):
            self.run_until(event.t)
            self.apply(event, base_dir)
        if until is not None:
            self.run_until(until)
        return self.trace

    def summary(self) -> dict:
        return {
            "t": self.now,
            "station_state": self.station.state.value,
            "contactor_closed": self.meter.contactor_closed,
            "meter_energy_wh": self.meter.energy_wh,
            "users": [
                {"user_id": u.user_id, "name": u.name, "quota_remaining_wh": u.quota_remaining}
                for u in self.store.snapshot().users
            ],
            "sessions": [
                {
                    "session_id": s.session_id, "user_id": s.user_id, "state": s.state,
                    "granted_budget_wh": s.granted_budget_wh, "consumed_wh": s.consumed_wh,
                    "flagged": s.flagged,
                }
                for s in self.service.sessions.values()
            ],
        }


def parse_events(raw: Sequence[dict]) -> list[ScenarioEvent]:
    events = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "t" not in item or "event" not in item:
            raise ScenarioError(f"events[{i}] needs 't' and 'event'")
        kind = item["event"]
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"events[{i}]: unknown event kind {kind!r}")
        args = {k: v for k, v in item.items() if k not in ("t", "event")}
        if kind == "present-face" and "file" not in args and "embedding" not in args:
            raise ScenarioError(f"events[{i}]: present-face needs 'file' or 'embedding'")
        if kind == "set-load" and "watts" not in args:
            raise ScenarioError(f"events[{i}]: set-load needs 'watts'")
        events.append(ScenarioEvent(float(item["t"]), kind, args))
    return events


def load_scenario(path: Path | str, replay_path: Optional[Path | str] = None) -> tuple[Simulation, list[ScenarioEvent], Optional[float]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    base = path.parent
    cfg = doc.get("config", {})
    store = EnrollmentStore(
        k=int(cfg.get("k", DEFAULT_K)), threshold=float(cfg.get("threshold", DEFAULT_THRESHOLD))
    )
    station_cfg = StationConfig(
        station_id=cfg.get("station_id", "station-1"),
        poll_interval=float(cfg.get("poll_interval", 1.0)),
        idle_timeout_s=cfg.get("idle_timeout_s"),
    )
    sim = Simulation(
        store,
        station_cfg,
        session_cap_wh=float(cfg.get("session_cap_wh", DEFAULT_SESSION_CAP_WH)),
        rated_power_w=float(cfg.get("rated_power_w", DEFAULT_RATED_POWER_W)),
        meter_watchdog_s=cfg.get("meter_watchdog_s"),
        replay_path=replay_path,
    )
    for user in doc.get("users", []):
        embeddings = [
            read_embedding_file(base / e) if isinstance(e, str) else e for e in user["embeddings"]
        ]
        store.enroll(user["name"], embeddings, user["quota_wh"], user.get("account_type", "standard"))
    until = doc.get("until")
    return sim, parse_events(doc.get("events", [])), float(until) if until is not None else None
