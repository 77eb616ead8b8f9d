"""JSON bodies exchanged between station and authentication server."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

from .embedding import EmbeddingError, as_embedding


class ProtocolError(ValueError):
    """Malformed request body; maps to an HTTP client error."""

    def __init__(self, message: str, status: int = 400) -> None:
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class AuthRequest:
    station_id: str
    embedding: np.ndarray


@dataclass(frozen=True)
class Granted:
    user_id: str
    name: str
    account_type: str
    session_id: str
    granted_budget_wh: float


@dataclass(frozen=True)
class NotFound:
    pass


@dataclass(frozen=True)
class QuotaExhausted:
    user_id: str
    name: str


AuthResponse = Union[Granted, NotFound, QuotaExhausted]


@dataclass(frozen=True)
class SessionEndAck:
    remaining_quota_wh: float
    flagged: bool


def dumps(doc: Any) -> bytes:
    return json.dumps(doc, allow_nan=False).encode("utf-8")


def loads(body: bytes) -> Any:
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"body is not valid JSON: {exc}") from None


def _require(doc: Any, key: str, kind: type | tuple[type, ...]) -> Any:
    if not isinstance(doc, dict):
        raise ProtocolError("body must be a JSON object")
    if key not in doc:
        raise ProtocolError(f"missing field {key!r}")
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ProtocolError(f"field {key!r} has the wrong type")
    return value


def parse_embedding(value: Any, field: str = "embedding") -> np.ndarray:
    if not isinstance(value, list) or any(
        isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
    ):
        raise ProtocolError(f"field {field!r} must be an array of numbers")
    try:
        return as_embedding(value)
    except EmbeddingError as exc:
        raise ProtocolError(f"{field}: {exc}") from None


def parse_number(doc: Any, key: str, *, minimum: float = 0.0) -> float:
    value = float(_require(doc, key, (int, float)))
    if not np.isfinite(value) or value < minimum:
        raise ProtocolError(f"field {key!r} must be a finite number >= {minimum}")
    return value


def encode_auth_request(station_id: str, embedding) -> dict:
    return {"station_id": station_id, "embedding": [float(v) for v in embedding]}


def decode_auth_request(doc: Any) -> AuthRequest:
    station_id = _require(doc, "station_id", str)
    return AuthRequest(station_id, parse_embedding(_require(doc, "embedding", list)))


def auth_response_to_http(resp: AuthResponse) -> tuple[int, dict]:
    if isinstance(resp, Granted):
        return 200, {
            "user_id": resp.user_id,
            "name": resp.name,
            "account_type": resp.account_type,
            "session_id": resp.session_id,
            "granted_budget_wh": resp.granted_budget_wh,
        }
    if isinstance(resp, QuotaExhausted):
        return 403, {"outcome": "quota_exhausted", "user_id": resp.user_id, "name": resp.name}
    return 404, {"outcome": "not_found"}


def auth_response_from_http(status: int, doc: Any) -> AuthResponse:
    if status == 200:
        return Granted(
            user_id=_require(doc, "user_id", str),
            name=_require(doc, "name", str),
            account_type=_require(doc, "account_type", str),
            session_id=_require(doc, "session_id", str),
            granted_budget_wh=parse_number(doc, "granted_budget_wh"),
        )
    if status == 403:
        return QuotaExhausted(_require(doc, "user_id", str), _require(doc, "name", str))
    if status == 404:
        return NotFound()
    raise ProtocolError(f"unexpected authenticate status {status}: {doc}", status)


def session_ack_to_http(ack: SessionEndAck) -> tuple[int, dict]:
    return 200, {"remaining_quota_wh": ack.remaining_quota_wh, "flagged": ack.flagged}


def session_ack_from_http(status: int, doc: Any) -> SessionEndAck:
    if status != 200:
        raise ProtocolError(f"session end rejected with status {status}: {doc}", status)
    flagged = doc.get("flagged") if isinstance(doc, dict) else None
    if not isinstance(flagged, bool):
        raise ProtocolError("field 'flagged' must be a boolean")
    return SessionEndAck(parse_number(doc, "remaining_quota_wh"), flagged)
