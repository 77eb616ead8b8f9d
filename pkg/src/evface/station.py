"""Edge station: authenticate a face vector, then meter and enforce the grant.

The station keeps the contactor open in every state except ``Charging``;
every error path opens it before changing state.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Protocol

import numpy as np

from .bench import read_embedding_file
from .client import AuthClient, ServerUnavailable
from .embedding import as_embedding
from .meter import MeterLink, MeterReading
from .modbus import ModbusError, ModbusException
from .wire import Granted, NotFound, ProtocolError, QuotaExhausted, SessionEndAck

log = logging.getLogger(__name__)

AUTH_ATTEMPTS = 3
BACKOFF_START_S = 0.5


# -- clocks ----------------------------------------------------------------


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class RealClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimClock:
    """Manually advanced clock; listeners see every advance (e.g. meter ticks)."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = start
        self._listeners: list[Callable[[float], None]] = []

    def now(self) -> float:
        return self._now

    def subscribe(self, listener: Callable[[float], None]) -> None:
        self._listeners.append(listener)

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("time cannot run backwards")
        if seconds == 0:
            return
        self._now += seconds
        for listener in self._listeners:
            listener(seconds)

    sleep = advance


# -- embedding sources -----------------------------------------------------


class EmbeddingSource(Protocol):
    def next_embedding(self) -> np.ndarray: ...


class FixtureFileSource:
    """Yields the vector stored in one ``.emb`` file, every time."""

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self._embedding = read_embedding_file(self.path)

    def next_embedding(self) -> np.ndarray:
        return self._embedding


class ScriptedSource:
    """Yields a fixed sequence of vectors, then raises ``StopIteration``."""

    def __init__(self, embeddings: Iterable) -> None:
        self._items: Iterator[np.ndarray] = iter([as_embedding(e) for e in embeddings])

    def next_embedding(self) -> np.ndarray:
        return next(self._items)


# -- state machine ---------------------------------------------------------


class SessionState(str, enum.Enum):
    IDLE = "Idle"
    AUTHENTICATING = "Authenticating"
    CHARGING = "Charging"
    COMPLETED = "Completed"
    CUTOFF = "CutOff"
    FAULTED = "Faulted"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


class Event(str, enum.Enum):
    PRESENT_FACE = "present_face"
    GRANTED = "granted"
    DENIED = "denied"
    AUTH_FAILED = "auth_failed"
    QUOTA_REACHED = "quota_reached"
    UNPLUG = "unplug"
    FAULT = "fault"


TERMINAL_STATES = frozenset({SessionState.COMPLETED, SessionState.CUTOFF, SessionState.FAULTED})

TRANSITIONS: dict[tuple[SessionState, Event], SessionState] = {
    (SessionState.IDLE, Event.PRESENT_FACE): SessionState.AUTHENTICATING,
    (SessionState.AUTHENTICATING, Event.GRANTED): SessionState.CHARGING,
    (SessionState.AUTHENTICATING, Event.DENIED): SessionState.IDLE,
    (SessionState.AUTHENTICATING, Event.AUTH_FAILED): SessionState.FAULTED,
    (SessionState.CHARGING, Event.UNPLUG): SessionState.COMPLETED,
    (SessionState.CHARGING, Event.QUOTA_REACHED): SessionState.CUTOFF,
    (SessionState.CHARGING, Event.FAULT): SessionState.FAULTED,
}


class IllegalTransition(RuntimeError):
    pass


def next_state(state: SessionState, event: Event) -> SessionState:
    """Apply one event; terminal states absorb anything."""
    if state.terminal:
        return state
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise IllegalTransition(f"{event.value} is not valid in state {state.value}") from None


# -- durable replay log ----------------------------------------------------


class ReplayLog:
    """Append-only JSON-lines file of session-end reports awaiting delivery.

    A later ``{"done": session_id}`` line retires an earlier report.
    """

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)

    def append(self, session_id: str, consumed_wh: float) -> None:
        self._write({"session_id": session_id, "consumed_wh": consumed_wh})

    def mark_done(self, session_id: str) -> None:
        self._write({"done": session_id})

    def _write(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def pending(self) -> list[tuple[str, float]]:
        if not self.path.exists():
            return []
        reports: dict[str, float] = {}
        for line in self.path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "done" in rec:
                reports.pop(rec["done"], None)
            else:
                reports[rec["session_id"]] = float(rec["consumed_wh"])
        return list(reports.items())


# -- station ---------------------------------------------------------------


@dataclass(frozen=True)
class StationConfig:
    station_id: str = "station-1"
    poll_interval: float = 1.0
    server_address: str = ""
    meter_address: str = ""
    # Stop a session whose metered energy has not moved for this long.
    idle_timeout_s: Optional[float] = None
    # Probe the server every poll; a dead server faults the session.
    heartbeat: bool = True
    report_attempts: int = AUTH_ATTEMPTS

    def __post_init__(self) -> None:
        if not self.poll_interval > 0:
            raise ValueError("poll_interval must be positive")


@dataclass
class ChargingSession:
    session_id: str = ""
    granted_budget_wh: float = 0.0
    consumed_wh: float = 0.0
    state: SessionState = SessionState.IDLE
    user_id: str = ""
    start_energy_raw: int = 0
    started_at: float = 0.0
    ended_at: Optional[float] = None
    reported: bool = False
    ack: Optional[SessionEndAck] = None
    history: list[SessionState] = field(default_factory=list)

    def apply(self, event: Event) -> SessionState:
        new = next_state(self.state, event)
        if new is not self.state:
            self.history.append(new)
        self.state = new
        return new


@dataclass(frozen=True)
class AuthOutcome:
    state: SessionState
    response: Optional[object] = None  # Granted | NotFound | QuotaExhausted
    error: Optional[str] = None


class Station:
    def __init__(
        self,
        config: StationConfig,
        server: AuthClient,
        meter: MeterLink,
        clock: Clock,
        replay_log: Optional[ReplayLog] = None,
    ) -> None:
        self.config = config
        self.server = server
        self.meter = meter
        self.clock = clock
        self.replay_log = replay_log
        self.session = ChargingSession()
        self.contactor_closed = False
        self._last_energy_change = 0.0

    @property
    def state(self) -> SessionState:
        return self.session.state

    # -- helpers -----------------------------------------------------------

    def _open_contactor(self) -> None:
        """Best effort: the meter's watchdog covers a dead link."""
        self.contactor_closed = False
        try:
            self.meter.set_contactor(False)
        except (ConnectionError, ModbusError, ModbusException) as exc:
            log.warning("could not open contactor: %s", exc)

    def _read_meter(self) -> MeterReading:
        return self.meter.read()

    # -- operations --------------------------------------------------------

    def begin_session(self, source: EmbeddingSource) -> AuthOutcome:
        if self.state is not SessionState.IDLE and not self.state.terminal:
            raise IllegalTransition(f"cannot begin a session in state {self.state.value}")
        self.replay_pending()
        self.session = ChargingSession(history=[SessionState.IDLE])
        self._open_contactor()
        self.session.apply(Event.PRESENT_FACE)
        embedding = source.next_embedding()

        response = None
        delay = BACKOFF_START_S
        for attempt in range(1, AUTH_ATTEMPTS + 1):
            try:
                response = self.server.authenticate(self.config.station_id, embedding)
                break
            except (ServerUnavailable, ProtocolError) as exc:
                log.warning("authenticate attempt %d/%d failed: %s", attempt, AUTH_ATTEMPTS, exc)
                if attempt < AUTH_ATTEMPTS:
                    self.clock.sleep(delay)
                    delay *= 2
        if response is None:
            self.session.apply(Event.AUTH_FAILED)
            return AuthOutcome(self.state, None, "server unreachable")

        if isinstance(response, (NotFound, QuotaExhausted)):
            self.session.apply(Event.DENIED)
            log.info("station=%s denied: %s", self.config.station_id, type(response).__name__)
            return AuthOutcome(self.state, response)

        assert isinstance(response, Granted)
        s = self.session
        s.session_id = response.session_id
        s.user_id = response.user_id
        s.granted_budget_wh = response.granted_budget_wh
        try:
            reading = self._read_meter()
            self.meter.set_contactor(True)
        except (ConnectionError, ModbusError, ModbusException) as exc:
            # Granted but the meter is gone: fault and hand the whole grant back.
            s.apply(Event.GRANTED)
            self._fault(f"meter unreachable at session start: {exc}")
            return AuthOutcome(self.state, response, str(exc))
        s.start_energy_raw = reading.energy_raw
        s.started_at = self._last_energy_change = self.clock.now()
        self.contactor_closed = True
        s.apply(Event.GRANTED)
        log.info("station=%s charging session=%s budget_wh=%s", self.config.station_id, s.session_id, s.granted_budget_wh)
        return AuthOutcome(self.state, response)

    def poll_and_enforce(self) -> SessionState:
        s = self.session
        if s.state is not SessionState.CHARGING:
            return s.state
        try:
            reading = self._read_meter()
        except (ConnectionError, ModbusError, ModbusException) as exc:
            self._fault(f"meter unreachable: {exc}")
            return s.state
        consumed = max(0, reading.energy_raw - s.start_energy_raw) / 10
        if consumed > s.consumed_wh:
            self._last_energy_change = self.clock.now()
        s.consumed_wh = max(s.consumed_wh, consumed)

        if s.consumed_wh >= s.granted_budget_wh:
            self._open_contactor()
            s.apply(Event.QUOTA_REACHED)
            s.ended_at = self.clock.now()
            log.info("station=%s cut off session=%s consumed_wh=%s", self.config.station_id, s.session_id, s.consumed_wh)
            self._report()
            return s.state

        if self.config.heartbeat:
            try:
                self.server.health()
            except ServerUnavailable as exc:
                self._fault(f"server unreachable: {exc}")
                return s.state

        idle = self.config.idle_timeout_s
        if idle is not None and self.clock.now() - self._last_energy_change >= idle:
            log.info("station=%s idle for %ss, ending session", self.config.station_id, idle)
            self.end_session("completed")
        return s.state

    def end_session(self, reason: str = "completed") -> Optional[SessionEndAck]:
        """Stop charging and report consumption; None if the report was queued."""
        s = self.session
        if s.state is SessionState.CHARGING:
            event = {"completed": Event.UNPLUG, "cutoff": Event.QUOTA_REACHED, "fault": Event.FAULT}[reason]
            self._open_contactor()
            s.apply(event)
            s.ended_at = self.clock.now()
        elif s.state not in (SessionState.CUTOFF, SessionState.FAULTED, SessionState.COMPLETED):
            raise IllegalTransition(f"no session to end in state {s.state.value}")
        self._open_contactor()
        if not s.reported and s.session_id:
            self._report()
        return s.ack

    def _fault(self, reason: str) -> None:
        log.error("station=%s fault: %s", self.config.station_id, reason)
        self._open_contactor()
        self.session.apply(Event.FAULT)
        self.session.ended_at = self.clock.now()
        self._report()

    def _report(self) -> None:
        s = self.session
        delay = BACKOFF_START_S
        for attempt in range(1, self.config.report_attempts + 1):
            try:
                s.ack = self.server.end_session(s.session_id, s.consumed_wh)
                s.reported = True
                return
            except (ServerUnavailable, ProtocolError) as exc:
                log.warning("session end report %d/%d failed: %s", attempt, self.config.report_attempts, exc)
                if attempt < self.config.report_attempts:
                    self.clock.sleep(delay)
                    delay *= 2
        if self.replay_log is not None:
            self.replay_log.append(s.session_id, s.consumed_wh)
            log.warning("session=%s end report queued for replay", s.session_id)
        else:
            log.error("session=%s end report lost (no replay log)", s.session_id)

    def replay_pending(self) -> int:
        """Deliver queued end reports; returns how many were acknowledged."""
        if self.replay_log is None:
            return 0
        delivered = 0
        for session_id, consumed in self.replay_log.pending():
            try:
                ack = self.server.end_session(session_id, consumed)
            except ServerUnavailable as exc:
                log.warning("replay of session=%s failed: %s", session_id, exc)
                continue
            except ProtocolError as exc:
                log.error("replay of session=%s rejected: %s; dropping", session_id, exc)
            else:
                delivered += 1
                if session_id == self.session.session_id:
                    self.session.ack, self.session.reported = ack, True
            self.replay_log.mark_done(session_id)
        return delivered
