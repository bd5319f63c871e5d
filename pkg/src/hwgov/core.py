"""Domain types shared by every governance module.

Everything here is an immutable value type. Behavior is limited to
validation and (de)serialization to plain dicts for the JSON stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Mapping


class InvalidProposal(ValueError):
    def __init__(self, field_name: str, reason: str) -> None:
        super().__init__(f"invalid proposal field {field_name!r}: {reason}")
        self.field = field_name
        self.reason = reason


class DecodeError(ValueError):
    """Raised when a stored record cannot be decoded."""


class ActionKind(str, Enum):
    READ = "read"
    PLAN = "plan"
    APPLY = "apply"
    RUN_COMMAND = "run_command"
    CHECK_IN = "check_in"


class ChangeCategory(str, Enum):
    API = "api"
    DATA_MODEL = "data_model"
    CONFIG = "config"
    SECURITY = "security"
    TEST = "test"
    DOC = "doc"
    GENERAL = "general"


class Phase(str, Enum):
    RESEARCH = "research"
    PLANNING = "planning"
    IMPLEMENTATION = "implementation"
    REVIEW = "review"

    @property
    def order(self) -> int:
        return _PHASE_ORDER.index(self)


_PHASE_ORDER = [Phase.RESEARCH, Phase.PLANNING, Phase.IMPLEMENTATION, Phase.REVIEW]


class Verdict(str, Enum):
    APPROVED = "approved"
    APPROVED_REMEMBERED = "approved_remembered"
    DENIED = "denied"
    CORRECTED_THEN_APPROVED = "corrected_then_approved"

    @property
    def is_approval(self) -> bool:
        return self is not Verdict.DENIED


class Initiator(str, Enum):
    POLICY_INITIATED = "policy_initiated"
    AGENT_INITIATED = "agent_initiated"
    SILENT_AUTO = "silent_auto"
    FLAGGED_AUTO = "flagged_auto"


class Route(str, Enum):
    BLOCKED = "blocked"
    LIVE_CHECK_IN = "live_check_in"
    FLAGGED_APPROVE = "flagged_approve"
    SILENT_APPROVE = "silent_approve"

    @property
    def strictness(self) -> int:
        # higher is stricter
        return {
            Route.SILENT_APPROVE: 0,
            Route.FLAGGED_APPROVE: 1,
            Route.LIVE_CHECK_IN: 2,
            Route.BLOCKED: 3,
        }[self]


class EventKind(str, Enum):
    DECISION_MADE = "decision_made"
    CORRECTION_GIVEN = "correction_given"
    GUIDANCE_GIVEN = "guidance_given"
    VERIFICATION_RUN = "verification_run"
    RULE_ADDED = "rule_added"
    PREFERENCE_CHANGED = "preference_changed"


class PreferenceName(str, Enum):
    PREFER_FEWER_CHECKINS = "prefer_fewer_checkins"
    SKIP_LOW_RISK_PLAN_CHECKPOINT = "skip_low_risk_plan_checkpoint"


# Which action kinds each workflow phase admits.
PHASE_PERMISSIONS: dict[Phase, frozenset[ActionKind]] = {
    Phase.RESEARCH: frozenset({ActionKind.READ, ActionKind.CHECK_IN}),
    Phase.PLANNING: frozenset({ActionKind.READ, ActionKind.PLAN, ActionKind.CHECK_IN}),
    Phase.IMPLEMENTATION: frozenset(
        {ActionKind.READ, ActionKind.APPLY, ActionKind.RUN_COMMAND, ActionKind.CHECK_IN}
    ),
    Phase.REVIEW: frozenset({ActionKind.READ, ActionKind.RUN_COMMAND, ActionKind.CHECK_IN}),
}

_NO_DIFF_KINDS = frozenset({ActionKind.READ, ActionKind.PLAN, ActionKind.CHECK_IN})


def decode_enum(enum_cls: type[Enum], value: Any) -> Any:
    """Strict enum decode: unknown discriminants raise instead of vanishing."""
    try:
        return enum_cls(value)
    except ValueError:
        raise DecodeError(f"unknown {enum_cls.__name__} value {value!r}") from None


@dataclass(frozen=True)
class ActionProposal:
    id: int
    action_kind: ActionKind
    paths: tuple[str, ...] = ()
    change_category: ChangeCategory = ChangeCategory.GENERAL
    diff_lines: int = 0
    files_touched: int = 0
    model_confidence: float = 0.5
    phase: Phase = Phase.RESEARCH
    rationale: str = ""

    def __post_init__(self) -> None:
        # accept lists from callers and fixtures
        if not isinstance(self.paths, tuple):
            object.__setattr__(self, "paths", tuple(self.paths))

    @property
    def unique_paths(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.paths))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "action_kind": self.action_kind.value,
            "paths": list(self.paths),
            "change_category": self.change_category.value,
            "diff_lines": self.diff_lines,
            "files_touched": self.files_touched,
            "model_confidence": self.model_confidence,
            "phase": self.phase.value,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ActionProposal":
        try:
            paths = tuple(data.get("paths", ()))
            files = data.get("files_touched")
            if files is None:
                files = len(dict.fromkeys(paths))
            return cls(
                id=int(data["id"]),
                action_kind=decode_enum(ActionKind, data["action_kind"]),
                paths=paths,
                change_category=decode_enum(
                    ChangeCategory, data.get("change_category", "general")
                ),
                diff_lines=int(data.get("diff_lines", 0)),
                files_touched=int(files),
                model_confidence=float(data.get("model_confidence", 0.5)),
                phase=decode_enum(Phase, data.get("phase", "research")),
                rationale=str(data.get("rationale", "")),
            )
        except KeyError as exc:
            raise DecodeError(f"proposal missing field {exc.args[0]!r}") from None


def validate_proposal(p: ActionProposal) -> None:
    """Raise :class:`InvalidProposal` unless every proposal invariant holds."""
    if not isinstance(p.action_kind, ActionKind):
        raise InvalidProposal("action_kind", "not an ActionKind")
    if not isinstance(p.change_category, ChangeCategory):
        raise InvalidProposal("change_category", "not a ChangeCategory")
    if not isinstance(p.phase, Phase):
        raise InvalidProposal("phase", "not a Phase")
    if p.diff_lines < 0:
        raise InvalidProposal("diff_lines", "must be nonnegative")
    if p.files_touched < 0:
        raise InvalidProposal("files_touched", "must be nonnegative")
    conf = p.model_confidence
    if not (isinstance(conf, (int, float)) and math.isfinite(conf) and 0.0 <= conf <= 1.0):
        raise InvalidProposal("model_confidence", f"{conf!r} outside [0, 1]")
    if p.action_kind in _NO_DIFF_KINDS and p.diff_lines != 0:
        raise InvalidProposal(
            "diff_lines", f"must be 0 for {p.action_kind.value} actions, got {p.diff_lines}"
        )
    if p.paths and p.files_touched != len(p.unique_paths):
        raise InvalidProposal(
            "files_touched",
            f"{p.files_touched} does not match {len(p.unique_paths)} distinct paths",
        )
    if any(not path or path.startswith("/") for path in p.paths):
        raise InvalidProposal("paths", "paths must be nonempty and repository-relative")


FEATURE_NAMES: tuple[str, ...] = (
    "diff_size_norm",
    "blast_radius_norm",
    "change_pattern_risk",
    "prior_approvals_norm",
    "prior_denials_norm",
    "is_security_sensitive",
    "verification_failure_rate",
    "model_confidence_avg",
    "is_first_touch",
    "action_type_risk",
    "phase_alignment",
    "session_approval_rate",
    "path_trust",
)


@dataclass(frozen=True)
class FeatureVector:
    diff_size_norm: float = 0.0
    blast_radius_norm: float = 0.0
    change_pattern_risk: float = 0.0
    prior_approvals_norm: float = 0.0
    prior_denials_norm: float = 0.0
    is_security_sensitive: float = 0.0
    verification_failure_rate: float = 0.0
    model_confidence_avg: float = 0.0
    is_first_touch: float = 0.0
    action_type_risk: float = 0.0
    phase_alignment: float = 0.0
    session_approval_rate: float = 0.0
    path_trust: float = 0.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"feature {f.name} = {v!r} is not a finite value in [0, 1]")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, name)) for name in FEATURE_NAMES)

    @classmethod
    def from_sequence(cls, values: Iterable[float]) -> "FeatureVector":
        values = tuple(values)
        if len(values) != len(FEATURE_NAMES):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features, got {len(values)}")
        return cls(**dict(zip(FEATURE_NAMES, values)))

    def to_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.as_tuple()))

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "FeatureVector":
        unknown = set(data) - set(FEATURE_NAMES)
        if unknown:
            raise DecodeError(f"unknown feature names {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class Decision:
    proposal_id: int
    verdict: Verdict
    initiator: Initiator
    score: float | None
    timestamp: int
    route: Route | None = None

    def __post_init__(self) -> None:
        if self.initiator in (Initiator.SILENT_AUTO, Initiator.FLAGGED_AUTO):
            if self.verdict is not Verdict.APPROVED:
                raise ValueError("auto-approved decisions must carry verdict Approved")
            if self.score is None:
                raise ValueError("auto-approved decisions always carry a score")

    def to_dict(self) -> dict[str, Any]:
        return {
            "proposal_id": self.proposal_id,
            "verdict": self.verdict.value,
            "initiator": self.initiator.value,
            "score": self.score,
            "timestamp": self.timestamp,
            "route": self.route.value if self.route else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Decision":
        route = data.get("route")
        return cls(
            proposal_id=int(data["proposal_id"]),
            verdict=decode_enum(Verdict, data["verdict"]),
            initiator=decode_enum(Initiator, data["initiator"]),
            score=None if data.get("score") is None else float(data["score"]),
            timestamp=int(data["timestamp"]),
            route=None if route is None else decode_enum(Route, route),
        )


@dataclass(frozen=True)
class TraceEvent:
    """One recorded developer/agent interaction.

    ``payload`` is a plain JSON-compatible dict whose shape depends on ``kind``;
    decision payloads carry ``decision`` plus the similarity key of the proposal.
    """

    kind: EventKind
    payload: Mapping[str, Any]
    session_id: str
    repo_id: str
    timestamp: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "payload": dict(self.payload),
            "session_id": self.session_id,
            "repo_id": self.repo_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TraceEvent":
        try:
            return cls(
                kind=decode_enum(EventKind, data["kind"]),
                payload=dict(data["payload"]),
                session_id=str(data["session_id"]),
                repo_id=str(data["repo_id"]),
                timestamp=int(data["timestamp"]),
            )
        except KeyError as exc:
            raise DecodeError(f"trace event missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class AutonomyPreference:
    name: PreferenceName
    scope_topics: frozenset[ChangeCategory] = field(default_factory=frozenset)
    active: bool = True

    def applies_to(self, category: ChangeCategory) -> bool:
        return self.active and (not self.scope_topics or category in self.scope_topics)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name.value,
            "scope_topics": sorted(t.value for t in self.scope_topics),
            "active": self.active,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AutonomyPreference":
        return cls(
            name=decode_enum(PreferenceName, data["name"]),
            scope_topics=frozenset(
                decode_enum(ChangeCategory, t) for t in data.get("scope_topics", ())
            ),
            active=bool(data.get("active", True)),
        )
