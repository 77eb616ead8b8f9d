"""Station-side clients for the authentication server."""

from __future__ import annotations

import json
import socket
import urllib.error
import urllib.request
from typing import Any, Optional

from . import wire
from .server import ADMIN_TOKEN_HEADER, AuthService
from .wire import AuthResponse, SessionEndAck


class ServerUnavailable(ConnectionError):
    """The server could not be reached or failed internally."""


class AuthClient:
    """Typed calls over some transport that moves JSON bodies."""

    def _call(self, method: str, path: str, doc: Any = None, headers: Optional[dict] = None) -> tuple[int, Any]:
        raise NotImplementedError

    def _checked(self, method: str, path: str, doc: Any = None, headers: Optional[dict] = None) -> tuple[int, Any]:
        status, body = self._call(method, path, doc, headers)
        if status >= 500:
            raise ServerUnavailable(f"{method} {path} failed with status {status}")
        return status, body

    def authenticate(self, station_id: str, embedding) -> AuthResponse:
        status, body = self._checked("POST", "/v1/authenticate", wire.encode_auth_request(station_id, embedding))
        return wire.auth_response_from_http(status, body)

    def end_session(self, session_id: str, consumed_wh: float) -> SessionEndAck:
        status, body = self._checked("POST", f"/v1/sessions/{session_id}/end", {"consumed_wh": consumed_wh})
        return wire.session_ack_from_http(status, body)

    def health(self) -> dict:
        status, body = self._checked("GET", "/v1/health")
        if status != 200:
            raise ServerUnavailable(f"health check returned {status}")
        return body

    def enroll(self, name: str, embeddings, quota_wh: float, account_type: str,
               admin_token: Optional[str] = None) -> tuple[int, dict]:
        doc = {
            "name": name,
            "embeddings": [[float(v) for v in e] for e in embeddings],
            "quota_wh": quota_wh,
            "account_type": account_type,
        }
        headers = {ADMIN_TOKEN_HEADER: admin_token} if admin_token else None
        return self._checked("POST", "/v1/admin/enroll", doc, headers)


class HttpAuthClient(AuthClient):
    def __init__(self, base_url: str, timeout: float = 5.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _call(self, method, path, doc=None, headers=None):
        data = wire.dumps(doc) if doc is not None else None
        req = urllib.request.Request(self.base_url + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        for key, value in (headers or {}).items():
            req.add_header(key, value)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read() or b"null")
        except urllib.error.HTTPError as err:
            payload = err.read()
            try:
                return err.code, json.loads(payload or b"null")
            except json.JSONDecodeError:
                return err.code, {"error": payload.decode("utf-8", "replace")}
        except (urllib.error.URLError, socket.timeout, ConnectionError) as exc:
            raise ServerUnavailable(f"{self.base_url}: {exc}") from exc


class LocalAuthClient(AuthClient):
    """In-process transport through the same JSON bytes as HTTP.

    Setting ``online`` to False simulates a dead server or a partition.
    """

    def __init__(self, service: AuthService) -> None:
        self.service = service
        self.online = True

    def _call(self, method, path, doc=None, headers=None):
        if not self.online:
            raise ServerUnavailable("server is down")
        body = wire.dumps(doc) if doc is not None else b""
        status, payload = self.service.dispatch(method, path, body, headers or {})
        return status, json.loads(payload)
