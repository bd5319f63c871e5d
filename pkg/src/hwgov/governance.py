"""The approval cascade.

Hard constraints are evaluated first and never consult the learned policy.
Past them, the phase gate, revoked topics, remembered grants and the plan gate
run in that order, and only then does the logistic score pick a band.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from enum import Enum
from typing import Any, Collection, Iterable, Mapping, Sequence

from .core import (
    PHASE_PERMISSIONS,
    ActionKind,
    ActionProposal,
    AutonomyPreference,
    ChangeCategory,
    FeatureVector,
    Initiator,
    Phase,
    PreferenceName,
    Route,
    decode_enum,
)
from .policy import PolicyState, SessionStats, TraceStoreView, extract_features, score, similarity_key

RISKY_CATEGORIES = frozenset(
    {ChangeCategory.API, ChangeCategory.DATA_MODEL, ChangeCategory.SECURITY, ChangeCategory.CONFIG}
)


class Effect(str, Enum):
    FORBID = "forbid"
    REQUIRE_CHECK_IN = "require_check_in"


class Mode(str, Enum):
    BALANCED = "balanced"
    STRICT = "strict"


class Tier(str, Enum):
    HARD_CONSTRAINT = "hard constraint"
    PHASE_GATE = "phase gate"
    REVOKED_TOPIC = "revoked topic"
    REMEMBERED_GRANT = "remembered grant"
    PLAN_GATE = "plan gate"
    LEARNED_POLICY = "learned policy"
    PREFERENCE = "autonomy preference"


def match_path(path: str, pattern: str) -> bool:
    """Anchored glob match. ``*``/``?`` stay inside one segment, ``**`` spans any number."""
    parts = [s for s in path.strip("/").split("/") if s]
    pats = [s for s in pattern.strip("/").split("/") if s]

    def rec(i: int, j: int) -> bool:
        if j == len(pats):
            return i == len(parts)
        if pats[j] == "**":
            return rec(i, j + 1) or (i < len(parts) and rec(i + 1, j))
        if i == len(parts) or not fnmatch.fnmatchcase(parts[i], pats[j]):
            return False
        return rec(i + 1, j + 1)

    return rec(0, 0)


@dataclass(frozen=True)
class HardConstraint:
    id: str
    action_filter: frozenset[ActionKind]
    effect: Effect
    path_glob: str = ""
    category_filter: frozenset[ChangeCategory] | None = None
    source_text: str = ""

    def matches(self, p: ActionProposal) -> bool:
        if p.action_kind not in self.action_filter:
            return False
        if self.category_filter is not None and p.change_category not in self.category_filter:
            return False
        if self.path_glob:
            return any(match_path(path, self.path_glob) for path in p.paths)
        return True

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "action_filter": sorted(k.value for k in self.action_filter),
            "effect": self.effect.value,
            "path_glob": self.path_glob,
            "category_filter": None
            if self.category_filter is None
            else sorted(c.value for c in self.category_filter),
            "source_text": self.source_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HardConstraint":
        cats = data.get("category_filter")
        return cls(
            id=str(data["id"]),
            action_filter=frozenset(decode_enum(ActionKind, k) for k in data["action_filter"]),
            effect=decode_enum(Effect, data["effect"]),
            path_glob=str(data.get("path_glob", "")),
            category_filter=None
            if cats is None
            else frozenset(decode_enum(ChangeCategory, c) for c in cats),
            source_text=str(data.get("source_text", "")),
        )


@dataclass(frozen=True)
class Thresholds:
    proceed: float = 0.90
    flag: float = 0.20
    mode: Mode = Mode.BALANCED
    fewer_checkins_shift: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.flag < self.proceed < 1.0:
            raise ValueError(f"thresholds need 0 < flag < proceed < 1, got {self.flag}, {self.proceed}")
        if not 0.0 <= self.fewer_checkins_shift < self.flag:
            raise ValueError("fewer_checkins_shift must be in [0, flag)")

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "Thresholds":
        return cls(
            proceed=float(config.get("proceed_threshold", 0.90)),
            flag=float(config.get("flag_threshold", 0.20)),
            mode=decode_enum(Mode, config.get("mode", "balanced")),
            fewer_checkins_shift=float(config.get("prefer_fewer_checkins_shift", 0.05)),
        )


@dataclass(frozen=True)
class CascadeOutcome:
    route: Route
    initiator: Initiator
    score: float | None
    explanation: str
    tier: Tier
    features: FeatureVector | None = None
    counts: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.tier is Tier.HARD_CONSTRAINT and self.score is not None:
            raise ValueError("hard-constraint outcomes never carry a score")
        if self.route is Route.LIVE_CHECK_IN and not self.explanation:
            raise ValueError("live check-ins need an explanation")


_ROUTE_INITIATOR = {
    Route.BLOCKED: Initiator.POLICY_INITIATED,
    Route.LIVE_CHECK_IN: Initiator.POLICY_INITIATED,
    Route.FLAGGED_APPROVE: Initiator.FLAGGED_AUTO,
    Route.SILENT_APPROVE: Initiator.SILENT_AUTO,
}


def phase_gate(kind: ActionKind, phase: Phase) -> bool:
    return kind in PHASE_PERMISSIONS[phase]


def band_route(s: float, thresholds: Thresholds, flag: float | None = None) -> Route:
    """Closed middle band: both ``flag`` and ``proceed`` land on FlaggedApprove."""
    flag = thresholds.flag if flag is None else flag
    if s > thresholds.proceed:
        return Route.SILENT_APPROVE
    if s >= flag:
        return Route.FLAGGED_APPROVE
    return Route.LIVE_CHECK_IN


def _active(prefs: Iterable[AutonomyPreference], name: PreferenceName, category: ChangeCategory) -> bool:
    return any(pref.name is name and pref.applies_to(category) for pref in prefs)


def plan_bypass_eligible(x: FeatureVector, thresholds: Thresholds) -> bool:
    return (
        thresholds.mode is Mode.BALANCED
        and x.is_security_sensitive == 0.0
        and x.change_pattern_risk < 0.7
        and x.path_trust >= 0.3
    )


def apply_preferences(
    p: ActionProposal,
    prefs: Sequence[AutonomyPreference],
    base_route: Route,
    *,
    x: FeatureVector,
    s: float,
    thresholds: Thresholds,
    revoked: Collection[ChangeCategory] = (),
) -> Route:
    """Adjust a band route for stored preferences. Revocations only ever tighten."""
    if p.change_category in revoked:
        return max(base_route, Route.LIVE_CHECK_IN, key=lambda r: r.strictness)
    route = base_route
    if (
        route is Route.LIVE_CHECK_IN
        and p.change_category not in RISKY_CATEGORIES
        and _active(prefs, PreferenceName.PREFER_FEWER_CHECKINS, p.change_category)
    ):
        route = band_route(s, thresholds, thresholds.flag - thresholds.fewer_checkins_shift)
    if (
        route is Route.LIVE_CHECK_IN
        and p.action_kind is ActionKind.PLAN
        and _active(prefs, PreferenceName.SKIP_LOW_RISK_PLAN_CHECKPOINT, p.change_category)
        and plan_bypass_eligible(x, thresholds)
    ):
        route = Route.FLAGGED_APPROVE
    return route


def _counts_line(counts: tuple[int, int]) -> str:
    return f"prior approvals {counts[0]}; prior denials {counts[1]}"


def evaluate(
    p: ActionProposal,
    constraints: Sequence[HardConstraint],
    prefs: Sequence[AutonomyPreference],
    state: PolicyState,
    thresholds: Thresholds,
    history: TraceStoreView,
    *,
    session: SessionStats | None = None,
    revoked: Collection[ChangeCategory] = (),
    granted: bool = False,
) -> CascadeOutcome:
    """Route one proposal. ``granted`` means remembered access covers every path."""
    matched = [c for c in constraints if c.matches(p)]
    forbid = [c for c in matched if c.effect is Effect.FORBID]
    if forbid:
        return CascadeOutcome(
            Route.BLOCKED,
            Initiator.POLICY_INITIATED,
            None,
            f"hard constraint {forbid[0].id}: {forbid[0].source_text or forbid[0].path_glob}",
            Tier.HARD_CONSTRAINT,
        )
    if matched:
        return CascadeOutcome(
            Route.LIVE_CHECK_IN,
            Initiator.POLICY_INITIATED,
            None,
            f"hard constraint {matched[0].id} requires a check-in: "
            f"{matched[0].source_text or matched[0].path_glob}",
            Tier.HARD_CONSTRAINT,
        )

    counts = history.counts_for(similarity_key(p))
    x = extract_features(p, history, session)
    s = score(state, x)

    def outcome(route: Route, tier: Tier, why: str) -> CascadeOutcome:
        return CascadeOutcome(route, _ROUTE_INITIATOR[route], s, why, tier, x, counts)

    if x.phase_alignment == 0.0:
        return outcome(
            Route.LIVE_CHECK_IN,
            Tier.PHASE_GATE,
            f"phase gate: {p.action_kind.value} is not allowed during {p.phase.value}",
        )
    if p.change_category in revoked:
        return outcome(
            Route.LIVE_CHECK_IN,
            Tier.REVOKED_TOPIC,
            f"revoked topic: {p.change_category.value} changes always check in; {_counts_line(counts)}",
        )
    if granted:
        return outcome(
            Route.SILENT_APPROVE,
            Tier.REMEMBERED_GRANT,
            f"remembered {p.action_kind.value} access; {_counts_line(counts)}",
        )

    plan_gated = p.action_kind is ActionKind.PLAN and (
        thresholds.mode is Mode.STRICT or p.files_touched >= 2
    )
    if plan_gated:
        base, tier = Route.LIVE_CHECK_IN, Tier.PLAN_GATE
        why = f"plan gate: {p.files_touched}-file plan needs approval in {thresholds.mode.value} mode"
    else:
        base, tier = band_route(s, thresholds), Tier.LEARNED_POLICY
        why = f"learned policy: score below the check-in bar; {_counts_line(counts)}"
    route = apply_preferences(p, prefs, base, x=x, s=s, thresholds=thresholds)
    if route is not base:
        tier = Tier.PREFERENCE
        why = f"autonomy preference relaxed the {base.value.replace('_', ' ')}; {_counts_line(counts)}"
    elif route is Route.FLAGGED_APPROVE:
        why = f"learned policy: approved, flagged for review; {_counts_line(counts)}"
    elif route is Route.SILENT_APPROVE:
        why = f"learned policy: approved; {_counts_line(counts)}"
    return outcome(route, tier, why)
