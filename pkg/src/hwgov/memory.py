"""Append-only trace log, guidance snippets, and autonomy preferences.

All three live as plain files in the state directory so any process can
rebuild the same view from disk.
"""

from __future__ import annotations

import json
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import (
    ActionKind,
    AutonomyPreference,
    ChangeCategory,
    Decision,
    EventKind,
    PreferenceName,
    Route,
    TraceEvent,
    Verdict,
    decode_enum,
)
from .policy import SimilarityKey

TRACES_FILE = "traces.jsonl"
GUIDANCE_FILE = "guidance.jsonl"
PREFERENCES_FILE = "preferences.json"


class OutOfOrderEvent(ValueError):
    pass


class UnknownTopic(ValueError):
    pass


def _read_jsonl(path: Path | None) -> Iterator[dict[str, Any]]:
    if path is None or not path.exists():
        return
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                # a writer is mid-append; readers see the committed prefix only
                break
            if line.strip():
                yield json.loads(line)


def _append_line(path: Path, record: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def decision_payload(
    decision: Decision,
    key: SimilarityKey,
    action_kind: ActionKind | None,
    paths: Iterable[str] = (),
    **extra: Any,
) -> dict[str, Any]:
    payload = {
        "decision": decision.to_dict(),
        "key": key.to_dict(),
        "action_kind": action_kind.value if action_kind else None,
        "paths": list(paths),
    }
    payload.update(extra)
    return payload


class TraceStore:
    """Append-only event log with in-memory indices rebuilt on open.

    Pass ``path=None`` for a throwaway in-memory store.
    """

    def __init__(self, path: Path | str | None = None, repo_id: str = "") -> None:
        self.path = Path(path) if path is not None else None
        self.repo_id = repo_id
        self._events: list[TraceEvent] = []
        self._counts: dict[SimilarityKey, list[int]] = defaultdict(lambda: [0, 0])
        self._touched: set[tuple[ActionKind, str]] = set()
        self._verifications: list[bool] = []
        self._read_grants: set[str] = set()
        self._write_grants: dict[str, set[str]] = defaultdict(set)
        self._last_ts: dict[str, int] = {}
        for record in _read_jsonl(self.path):
            self._index(TraceEvent.from_dict(record))

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(list(self._events))

    @property
    def events(self) -> tuple[TraceEvent, ...]:
        return tuple(self._events)

    def next_timestamp(self) -> int:
        return max(self._last_ts.values(), default=0) + 1

    def append(self, event: TraceEvent) -> None:
        last = self._last_ts.get(event.session_id)
        if last is not None and event.timestamp <= last:
            raise OutOfOrderEvent(
                f"timestamp {event.timestamp} is not after {last} in session {event.session_id}"
            )
        if self.path is not None:
            _append_line(self.path, event.to_dict())
        self._index(event)

    def record(self, kind: EventKind, payload: dict[str, Any], session_id: str) -> TraceEvent:
        """Append an event stamped with the next free timestamp."""
        event = TraceEvent(kind, payload, session_id, self.repo_id, self.next_timestamp())
        self.append(event)
        return event

    def _index(self, event: TraceEvent) -> None:
        self._events.append(event)
        self._last_ts[event.session_id] = event.timestamp
        if event.kind is EventKind.VERIFICATION_RUN:
            self._verifications.append(bool(event.payload["passed"]))
        if event.kind is not EventKind.DECISION_MADE:
            return
        payload = event.payload
        decision = Decision.from_dict(payload["decision"])
        key = SimilarityKey(
            decode_enum(ChangeCategory, payload["key"]["category"]), payload["key"]["area"]
        )
        approved = decision.verdict.is_approval
        self._counts[key][0 if approved else 1] += 1
        kind = payload.get("action_kind")
        if kind is None or not approved:
            return
        kind = decode_enum(ActionKind, kind)
        paths = payload.get("paths", [])
        self._touched.update((kind, p) for p in paths)
        if decision.verdict is Verdict.APPROVED_REMEMBERED:
            # read grants outlive the session, write grants do not
            if kind is ActionKind.READ:
                self._read_grants.update(paths)
            elif kind is ActionKind.APPLY:
                self._write_grants[event.session_id].update(paths)

    # -- queries used by feature extraction ----------------------------------

    def counts_for(self, key: SimilarityKey) -> tuple[int, int]:
        a, d = self._counts.get(key, (0, 0))
        return a, d

    def has_touched(self, path: str, kind: ActionKind) -> bool:
        return (kind, path) in self._touched

    def recent_verifications(self, n: int) -> list[bool]:
        return self._verifications[-n:] if n > 0 else []

    def is_granted(self, kind: ActionKind, paths: Iterable[str], session_id: str) -> bool:
        paths = list(paths)
        if not paths:
            return False
        if kind is ActionKind.READ:
            return all(p in self._read_grants for p in paths)
        if kind is ActionKind.APPLY:
            grants = self._write_grants.get(session_id, set())
            return all(p in grants for p in paths)
        return False

    def decisions(self, session_id: str | None = None) -> list[tuple[TraceEvent, Decision]]:
        return [
            (e, Decision.from_dict(e.payload["decision"]))
            for e in self._events
            if e.kind is EventKind.DECISION_MADE
            and (session_id is None or e.session_id == session_id)
        ]

    def sessions(self) -> list[str]:
        return list(dict.fromkeys(e.session_id for e in self._events))


# -- guidance retrieval -------------------------------------------------------

STOPWORDS = frozenset(
    """a an and are as at be by for from has in into is it its of on or that the this
    to was were will with if unless any""".split()
)
_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> set[str]:
    return {t for t in _TOKEN.findall(text.lower()) if t not in STOPWORDS}


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class Snippet:
    id: str
    text: str
    source: str
    created_at: int
    topics: frozenset[str] = field(default_factory=frozenset)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "source": self.source,
            "created_at": self.created_at,
            "topics": sorted(self.topics),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Snippet":
        return cls(
            id=str(data["id"]),
            text=str(data["text"]),
            source=str(data["source"]),
            created_at=int(data["created_at"]),
            topics=frozenset(data.get("topics", ())),
        )


class GuidanceStore:
    """Corrections, behavioral guidance and notes. Snippets are never edited."""

    MIN_SCORE = 0.05

    def __init__(self, path: Path | str | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._snippets = [Snippet.from_dict(r) for r in _read_jsonl(self.path)]

    def __len__(self) -> int:
        return len(self._snippets)

    @property
    def snippets(self) -> tuple[Snippet, ...]:
        return tuple(self._snippets)

    def add(self, text: str, source: str, topics: Iterable[str] = ()) -> Snippet:
        text = text.strip()
        if not text:
            raise ValueError("guidance text must be nonempty")
        created = max((s.created_at for s in self._snippets), default=0) + 1
        snippet = Snippet(
            id=f"g{created}",
            text=text,
            source=source,
            created_at=created,
            topics=frozenset(t.lower() for t in topics) or frozenset(tokenize(text)),
        )
        if self.path is not None:
            _append_line(self.path, snippet.to_dict())
        self._snippets.append(snippet)
        return snippet

    def relevance(self, snippet: Snippet, query: str) -> float:
        return jaccard(tokenize(snippet.text), tokenize(query))

    def retrieve(self, task_description: str, k: int = 3) -> list[Snippet]:
        if k < 1:
            raise ValueError("k must be at least 1")
        scored = [(self.relevance(s, task_description), s) for s in self._snippets]
        scored = [(sc, s) for sc, s in scored if sc > 0 and sc >= self.MIN_SCORE]
        scored.sort(key=lambda item: (-item[0], -item[1].created_at))
        return [s for _, s in scored[:k]]


# -- preferences ---------------------------------------------------------------


class PreferenceStore:
    """Active autonomy preferences and revoked topics, mirrored to JSON."""

    def __init__(self, path: Path | str | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.active: list[AutonomyPreference] = []
        self.revoked_topics: list[ChangeCategory] = []
        if self.path is not None and self.path.exists():
            doc = json.loads(self.path.read_text(encoding="utf-8"))
            self.active = [AutonomyPreference.from_dict(d) for d in doc.get("active", [])]
            self.revoked_topics = [
                decode_enum(ChangeCategory, t) for t in doc.get("revoked_topics", [])
            ]

    def _save(self) -> None:
        if self.path is None:
            return
        doc = {
            "active": [p.to_dict() for p in self.active],
            "revoked_topics": [t.value for t in self.revoked_topics],
        }
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        tmp.replace(self.path)

    def has(self, name: PreferenceName) -> bool:
        return any(p.name is name and p.active for p in self.active)

    def record(self, pref: AutonomyPreference, traces: TraceStore, session_id: str) -> None:
        self.active = [p for p in self.active if p.name is not pref.name] + [pref]
        self._save()
        traces.record(
            EventKind.PREFERENCE_CHANGED,
            {"change": "set", "preference": pref.to_dict()},
            session_id,
        )

    def revoke_topic(self, topic: str | ChangeCategory, traces: TraceStore, session_id: str) -> ChangeCategory:
        try:
            category = ChangeCategory(topic)
        except ValueError:
            raise UnknownTopic(
                f"unknown topic {topic!r}; expected one of {[c.value for c in ChangeCategory]}"
            ) from None
        if category not in self.revoked_topics:
            self.revoked_topics.append(category)
            self._save()
        traces.record(
            EventKind.PREFERENCE_CHANGED,
            {"change": "revoke_topic", "topic": category.value},
            session_id,
        )
        return category


def is_live_checkin(decision: Decision) -> bool:
    return decision.route is Route.LIVE_CHECK_IN
