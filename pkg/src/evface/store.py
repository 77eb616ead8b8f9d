"""Enrolled users, their energy quota, and the recognizer model built from them.

All mutations go through one lock (single writer) and are persisted with
write-to-temp-then-rename before they become visible. Recognition reads the
current immutable :class:`KnnModel` without taking the lock.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .embedding import (
    DEFAULT_K,
    DEFAULT_THRESHOLD,
    KnnModel,
    LabeledEmbedding,
    Match,
    as_embedding,
    knn_fit,
)

log = logging.getLogger(__name__)

ACCOUNT_TYPES = ("standard", "premium", "staff")
# Absorbs float residue when retiring reservations.
_EPS_WH = 1e-9


class StoreError(Exception):
    pass


class DuplicateNameError(StoreError):
    pass


class UnknownUserError(StoreError, KeyError):
    pass


class RefundError(StoreError):
    pass


class PersistenceError(StoreError):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    name: str
    embeddings: tuple[np.ndarray, ...]
    quota_remaining: float
    account_type: str
    # Energy granted to sessions and not yet settled by a refund.
    reserved_wh: float = 0.0

    def to_doc(self) -> dict:
        return {
            "user_id": self.user_id,
            "name": self.name,
            "embeddings": [[float(v) for v in e] for e in self.embeddings],
            "quota_remaining_wh": self.quota_remaining,
            "account_type": self.account_type,
            "reserved_wh": self.reserved_wh,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "UserRecord":
        return cls(
            user_id=str(doc["user_id"]),
            name=str(doc["name"]),
            embeddings=tuple(as_embedding(e) for e in doc["embeddings"]),
            quota_remaining=float(doc["quota_remaining_wh"]),
            account_type=str(doc["account_type"]),
            reserved_wh=float(doc.get("reserved_wh", 0.0)),
        )

    def same_as(self, other: "UserRecord") -> bool:
        return self.to_doc() == other.to_doc()


@dataclass(frozen=True)
class StoreSnapshot:
    users: tuple[UserRecord, ...]
    version: int

    def to_doc(self) -> dict:
        return {"version": self.version, "users": [u.to_doc() for u in self.users]}

    def same_as(self, other: "StoreSnapshot") -> bool:
        return self.to_doc() == other.to_doc()


def _validate_embeddings(embeddings: Iterable) -> tuple[np.ndarray, ...]:
    embs = tuple(as_embedding(e) for e in embeddings)
    if not embs:
        raise ValueError("at least one embedding is required")
    return embs


class EnrollmentStore:
    def __init__(
        self,
        path: Optional[Path | str] = None,
        k: int = DEFAULT_K,
        threshold: float = DEFAULT_THRESHOLD,
        id_factory: Callable[[], str] = lambda: uuid.uuid4().hex,
    ) -> None:
        self.path = Path(path) if path is not None else None
        self.k = k
        self.threshold = threshold
        self._new_id = id_factory
        self._lock = threading.RLock()
        self._users: dict[str, UserRecord] = {}
        self._version = 0
        if self.path is not None and self.path.exists():
            self._load()
        self._model = self._build_model(self._users)

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        assert self.path is not None
        try:
            doc = json.loads(self.path.read_text(encoding="utf-8"))
            users = [UserRecord.from_doc(u) for u in doc["users"]]
            version = int(doc["version"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise PersistenceError(f"cannot load store {self.path}: {exc}") from exc
        self._users = {u.user_id: u for u in users}
        self._version = version

    def _write(self, users: dict[str, UserRecord], version: int) -> None:
        if self.path is None:
            return
        doc = StoreSnapshot(tuple(users.values()), version).to_doc()
        data = json.dumps(doc, indent=1, allow_nan=False)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as exc:
            raise PersistenceError(f"cannot write store {self.path}: {exc}") from exc

    def _commit(self, users: dict[str, UserRecord], rebuild: bool = False) -> None:
        # Persist first; in-memory state only changes once the write succeeded.
        version = self._version + 1
        self._write(users, version)
        if rebuild:
            self._model = self._build_model(users)
        self._users = users
        self._version = version

    def flush(self) -> None:
        with self._lock:
            self._write(self._users, self._version)

    # -- model -------------------------------------------------------------

    def _build_model(self, users: dict[str, UserRecord]) -> KnnModel:
        training = [
            LabeledEmbedding(u.user_id, e) for u in users.values() for e in u.embeddings
        ]
        return knn_fit(training, k=self.k, threshold=self.threshold)

    @property
    def model(self) -> KnnModel:
        return self._model

    @property
    def version(self) -> int:
        return self._version

    def snapshot(self) -> StoreSnapshot:
        with self._lock:
            return StoreSnapshot(tuple(self._users.values()), self._version)

    def get(self, user_id: str) -> UserRecord:
        try:
            return self._users[user_id]
        except KeyError:
            raise UnknownUserError(user_id) from None

    def __len__(self) -> int:
        return len(self._users)

    # -- operations --------------------------------------------------------

    def enroll(
        self,
        name: str,
        embeddings: Sequence,
        quota_wh: float,
        account_type: str = "standard",
    ) -> UserRecord:
        if not isinstance(name, str) or not name.strip():
            raise ValueError("name must be a non-empty string")
        quota_wh = float(quota_wh)
        if not np.isfinite(quota_wh) or quota_wh < 0:
            raise ValueError(f"quota must be a non-negative finite number, got {quota_wh}")
        if account_type not in ACCOUNT_TYPES:
            raise ValueError(f"account_type must be one of {ACCOUNT_TYPES}, got {account_type!r}")
        embs = _validate_embeddings(embeddings)
        with self._lock:
            if any(u.name == name for u in self._users.values()):
                raise DuplicateNameError(f"user {name!r} is already enrolled")
            record = UserRecord(self._new_id(), name, embs, quota_wh, account_type)
            users = dict(self._users)
            users[record.user_id] = record
            self._commit(users, rebuild=True)
        log.info("enrolled user_id=%s name=%s labels=%d", record.user_id, name, len(self._model.labels))
        return record

    def find_by_embedding(self, query) -> Optional[UserRecord]:
        result = self._model.predict(query)
        if isinstance(result, Match):
            return self._users.get(result.label)
        return None

    def reserve_budget(self, user_id: str, requested_wh: float) -> float:
        """Grant ``min(requested, remaining)`` and deduct it; 0 means exhausted."""
        requested_wh = float(requested_wh)
        if not np.isfinite(requested_wh) or requested_wh <= 0:
            raise ValueError(f"requested energy must be positive, got {requested_wh}")
        with self._lock:
            user = self.get(user_id)
            granted = min(requested_wh, user.quota_remaining)
            if granted > 0:
                users = dict(self._users)
                users[user_id] = replace(
                    user,
                    quota_remaining=user.quota_remaining - granted,
                    reserved_wh=user.reserved_wh + granted,
                )
                self._commit(users)
            return granted

    def refund_budget(self, user_id: str, unused_wh: float, consumed_wh: float = 0.0) -> float:
        """Return ``unused_wh`` to the quota and retire ``consumed_wh`` as spent.

        Both come out of the user's outstanding reservation. Returns the
        updated quota.
        """
        unused_wh, consumed_wh = float(unused_wh), float(consumed_wh)
        if not (np.isfinite(unused_wh) and unused_wh >= 0):
            raise ValueError(f"refund must be non-negative, got {unused_wh}")
        if not (np.isfinite(consumed_wh) and consumed_wh >= 0):
            raise ValueError(f"consumed energy must be non-negative, got {consumed_wh}")
        with self._lock:
            user = self.get(user_id)
            settled = unused_wh + consumed_wh
            if settled > user.reserved_wh + _EPS_WH:
                raise RefundError(
                    f"refund of {settled} Wh exceeds outstanding reservation "
                    f"{user.reserved_wh} Wh for {user_id}"
                )
            if settled == 0:
                return user.quota_remaining
            reserved = user.reserved_wh - settled
            users = dict(self._users)
            users[user_id] = replace(
                user,
                quota_remaining=user.quota_remaining + unused_wh,
                reserved_wh=reserved if reserved > _EPS_WH else 0.0,
            )
            self._commit(users)
            return users[user_id].quota_remaining
