"""Authentication and accounting service plus its HTTP front end."""

from __future__ import annotations

import logging
import re
import threading
import time
import uuid
from dataclasses import dataclass, replace
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping, Optional

from . import wire
from .store import DuplicateNameError, EnrollmentStore, PersistenceError, UserRecord
from .wire import (
    AuthRequest,
    AuthResponse,
    Granted,
    NotFound,
    ProtocolError,
    QuotaExhausted,
    SessionEndAck,
)

log = logging.getLogger(__name__)

DEFAULT_SESSION_CAP_WH = 2000.0
DEFAULT_RATED_POWER_W = 7400.0
DEFAULT_METER_TICK_S = 1.0
DEFAULT_STALE_AFTER_S = 24 * 3600.0
ADMIN_TOKEN_HEADER = "X-Admin-Token"

_SESSION_END = re.compile(r"^/v1/sessions/([^/]+)/end$")


class UnknownSessionError(KeyError):
    pass


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    user_id: str
    station_id: str
    granted_budget_wh: float
    opened_at: float
    consumed_wh: float = 0.0
    state: str = "open"
    # What the station reported, before clamping to the grant.
    reported_wh: Optional[float] = None
    flagged: bool = False
    ack: Optional[SessionEndAck] = None


class AuthService:
    """Recognition, budget reservation and session reconciliation.

    The server grants a budget when it authenticates; the station enforces
    it against its meter and reports consumption when the session ends.
    """

    def __init__(
        self,
        store: EnrollmentStore,
        session_cap_wh: float = DEFAULT_SESSION_CAP_WH,
        rated_power_w: float = DEFAULT_RATED_POWER_W,
        meter_tick_s: float = DEFAULT_METER_TICK_S,
        stale_after_s: float = DEFAULT_STALE_AFTER_S,
        clock: Callable[[], float] = time.monotonic,
        admin_token: Optional[str] = None,
        id_factory: Callable[[], str] = lambda: uuid.uuid4().hex,
    ) -> None:
        if session_cap_wh <= 0:
            raise ValueError("session cap must be positive")
        self.store = store
        self.session_cap_wh = float(session_cap_wh)
        # One meter tick of energy at full rated power.
        self.overrun_tolerance_wh = rated_power_w * meter_tick_s / 3600.0
        self.stale_after_s = stale_after_s
        self.clock = clock
        self.admin_token = admin_token
        self._new_id = id_factory
        self._sessions: dict[str, SessionRecord] = {}
        self._sessions_lock = threading.Lock()

    @property
    def sessions(self) -> dict[str, SessionRecord]:
        with self._sessions_lock:
            return dict(self._sessions)

    # -- operations --------------------------------------------------------

    def handle_authenticate(self, request: AuthRequest) -> AuthResponse:
        self.expire_stale_sessions()
        user = self.store.find_by_embedding(request.embedding)
        if user is None:
            log.info("authenticate station=%s outcome=not_found", request.station_id)
            return NotFound()
        granted = self.store.reserve_budget(user.user_id, self.session_cap_wh)
        if granted <= 0:
            log.info("authenticate station=%s user=%s outcome=quota_exhausted", request.station_id, user.user_id)
            return QuotaExhausted(user.user_id, user.name)
        session = SessionRecord(
            session_id=self._new_id(),
            user_id=user.user_id,
            station_id=request.station_id,
            granted_budget_wh=granted,
            opened_at=self.clock(),
        )
        with self._sessions_lock:
            self._sessions[session.session_id] = session
        log.info(
            "authenticate station=%s user=%s session=%s granted_wh=%s",
            request.station_id, user.user_id, session.session_id, granted,
        )
        return Granted(user.user_id, user.name, user.account_type, session.session_id, granted)

    def handle_session_end(self, session_id: str, consumed_wh: float) -> SessionEndAck:
        with self._sessions_lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise UnknownSessionError(session_id)
            if session.state == "closed":
                assert session.ack is not None
                return session.ack
            return self._close(session, consumed_wh)

    def _close(self, session: SessionRecord, reported_wh: float) -> SessionEndAck:
        # Caller holds the sessions lock.
        granted = session.granted_budget_wh
        flagged = reported_wh > granted + self.overrun_tolerance_wh
        consumed = min(reported_wh, granted)
        remaining = self.store.refund_budget(session.user_id, granted - consumed, consumed)
        ack = SessionEndAck(remaining, flagged)
        self._sessions[session.session_id] = replace(
            session, consumed_wh=consumed, state="closed", reported_wh=reported_wh,
            flagged=flagged, ack=ack,
        )
        log.info(
            "session_end session=%s consumed_wh=%s refund_wh=%s flagged=%s",
            session.session_id, reported_wh, granted - consumed, flagged,
        )
        return ack

    def expire_stale_sessions(self) -> list[str]:
        """Close sessions idle past the timeout as if the whole grant was used."""
        now = self.clock()
        expired = []
        with self._sessions_lock:
            for session in list(self._sessions.values()):
                if session.state == "open" and now - session.opened_at >= self.stale_after_s:
                    self._close(session, session.granted_budget_wh)
                    expired.append(session.session_id)
        for sid in expired:
            log.warning("session=%s expired as stale", sid)
        return expired

    def handle_enroll(self, name: str, embeddings, quota_wh: float, account_type: str) -> UserRecord:
        return self.store.enroll(name, embeddings, quota_wh, account_type)

    # -- wire dispatch -----------------------------------------------------

    def dispatch(
        self, method: str, path: str, body: bytes = b"", headers: Mapping[str, str] | None = None
    ) -> tuple[int, bytes]:
        """Route one request; returns ``(status, json_body)``."""
        headers = headers or {}
        try:
            status, doc = self._route(method, path.split("?", 1)[0], body, headers)
        except ProtocolError as exc:
            status, doc = exc.status, {"error": str(exc)}
        except PersistenceError as exc:
            log.error("store failure: %s", exc)
            status, doc = 500, {"error": "store unavailable"}
        return status, wire.dumps(doc)

    def _route(self, method: str, path: str, body: bytes, headers: Mapping[str, str]) -> tuple[int, dict]:
        if path == "/v1/health":
            if method != "GET":
                raise ProtocolError("method not allowed", 405)
            model = self.store.model
            return 200, {"status": "ok", "users": len(self.store), "labels": len(model.labels)}
        if method != "POST":
            if path == "/v1/authenticate" or path == "/v1/admin/enroll" or _SESSION_END.match(path):
                raise ProtocolError("method not allowed", 405)
            raise ProtocolError(f"no route for {path}", 404)

        if path == "/v1/authenticate":
            request = wire.decode_auth_request(wire.loads(body))
            return wire.auth_response_to_http(self.handle_authenticate(request))

        m = _SESSION_END.match(path)
        if m:
            consumed = wire.parse_number(wire.loads(body), "consumed_wh")
            try:
                ack = self.handle_session_end(m.group(1), consumed)
            except UnknownSessionError:
                raise ProtocolError(f"unknown session {m.group(1)}", 404) from None
            return wire.session_ack_to_http(ack)

        if path == "/v1/admin/enroll":
            if self.admin_token is not None:
                supplied = {k.lower(): v for k, v in headers.items()}.get(ADMIN_TOKEN_HEADER.lower())
                if supplied != self.admin_token:
                    raise ProtocolError("admin token missing or wrong", 401)
            doc = wire.loads(body)
            name = wire._require(doc, "name", str)
            raw = wire._require(doc, "embeddings", list)
            embeddings = [wire.parse_embedding(e, f"embeddings[{i}]") for i, e in enumerate(raw)]
            quota = wire.parse_number(doc, "quota_wh")
            account_type = wire._require(doc, "account_type", str)
            try:
                record = self.handle_enroll(name, embeddings, quota, account_type)
            except DuplicateNameError as exc:
                raise ProtocolError(str(exc), 409) from None
            except ValueError as exc:
                raise ProtocolError(str(exc)) from None
            return 201, {"user_id": record.user_id}

        raise ProtocolError(f"no route for {path}", 404)


class _Handler(BaseHTTPRequestHandler):
    server: "AuthHTTPServer"
    protocol_version = "HTTP/1.1"

    def _serve(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        status, payload = self.server.service.dispatch(
            self.command, self.path, body, dict(self.headers.items())
        )
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    do_GET = do_POST = do_PUT = do_DELETE = _serve

    def log_message(self, format: str, *args) -> None:
        log.debug("%s %s", self.address_string(), format % args)


class AuthHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: AuthService) -> None:
        super().__init__(address, _Handler)
        self.service = service

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="auth-http", daemon=True)
        thread.start()
        return thread
