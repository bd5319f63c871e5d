"""Read-only views over governance state, plus the one write: topic revocation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

from .core import FEATURE_NAMES, ChangeCategory, EventKind, Initiator, Route
from .governance import Thresholds
from .memory import PreferenceStore, TraceStore
from .policy import PolicyState, weight_deltas

SCHEMA_VERSION = 1


def show_preferences(prefs: PreferenceStore, thresholds: Thresholds) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "active": [p.to_dict() for p in prefs.active if p.active],
        "revoked_topics": [t.value for t in prefs.revoked_topics],
        "bands": {
            "proceed": thresholds.proceed,
            "flag": thresholds.flag,
            "mode": thresholds.mode.value,
        },
    }


def render_preferences(view: dict[str, Any]) -> str:
    b = view["bands"]
    lines = ["autonomy preferences:"]
    if not view["active"]:
        lines.append("  (none)")
    for p in view["active"]:
        scope = ", ".join(p["scope_topics"]) or "all topics"
        lines.append(f"  {p['name']} (scope: {scope})")
    for topic in view["revoked_topics"]:
        lines.append(f"  {topic}: revoked (forces check-in)")
    lines.append(
        f"scoring bands ({b['mode']} mode): above {b['proceed']:.2f} approved silently; "
        f"{b['flag']:.2f} to {b['proceed']:.2f} approved and flagged; "
        f"below {b['flag']:.2f} live check-in"
    )
    return "\n".join(lines)


def show_weights(state: PolicyState) -> dict[str, Any]:
    prior = dict(zip(FEATURE_NAMES, state.warm_start_weights))
    learned = dict(zip(FEATURE_NAMES, state.weights))
    rows = [
        {"feature": name, "prior": prior[name], "learned": learned[name], "delta": delta}
        for name, delta in weight_deltas(state)
    ]
    bias_row = {
        "feature": "bias",
        "prior": state.warm_start_bias,
        "learned": state.bias,
        "delta": state.bias - state.warm_start_bias,
    }
    return {"schema": SCHEMA_VERSION, "updates": state.update_count, "rows": rows, "bias": bias_row}


def render_weights(view: dict[str, Any]) -> str:
    lines = [f"{'feature':<28}{'prior':>10}{'learned':>10}{'delta':>10}"]
    for r in view["rows"] + [view["bias"]]:
        lines.append(f"{r['feature']:<28}{r['prior']:>10.3f}{r['learned']:>10.3f}{r['delta']:>+10.3f}")
    lines.append(f"{view['updates']} updates since warm-start")
    return "\n".join(lines)


@dataclass(frozen=True)
class Report:
    sessions: int
    agent_initiated: int
    agent_approved: int
    policy_checkins: int
    deliberate_approvals: int
    denials: int
    silent_approvals: int
    flagged_approvals: int
    blocked: int
    verification_passed: int
    verification_total: int

    @property
    def agent_approval_rate(self) -> float | None:
        return self.agent_approved / self.agent_initiated if self.agent_initiated else None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["agent_approval_rate"] = self.agent_approval_rate
        d["schema"] = SCHEMA_VERSION
        return d


def show_report(traces: TraceStore, session_id: str | None = None) -> Report:
    """Aggregate the trace log. Every number derives from events alone."""
    counts = dict.fromkeys(
        ["agent", "agent_ok", "policy", "policy_ok", "denied", "silent", "flagged", "blocked"], 0
    )
    for _, d in traces.decisions(session_id):
        if d.initiator is Initiator.AGENT_INITIATED:
            counts["agent"] += 1
            counts["agent_ok"] += d.verdict.is_approval
        elif d.route is Route.BLOCKED:
            counts["blocked"] += 1
        elif d.initiator is Initiator.POLICY_INITIATED:
            counts["policy"] += 1
            counts["policy_ok"] += d.verdict.is_approval
            counts["denied"] += not d.verdict.is_approval
        elif d.initiator is Initiator.SILENT_AUTO:
            counts["silent"] += 1
        elif d.initiator is Initiator.FLAGGED_AUTO:
            counts["flagged"] += 1
    runs = [
        bool(e.payload["passed"])
        for e in traces
        if e.kind is EventKind.VERIFICATION_RUN and (session_id is None or e.session_id == session_id)
    ]
    sessions = traces.sessions() if session_id is None else [session_id]
    return Report(
        sessions=len(sessions),
        agent_initiated=counts["agent"],
        agent_approved=counts["agent_ok"],
        policy_checkins=counts["policy"],
        deliberate_approvals=counts["policy_ok"],
        denials=counts["denied"],
        silent_approvals=counts["silent"],
        flagged_approvals=counts["flagged"],
        blocked=counts["blocked"],
        verification_passed=sum(runs),
        verification_total=len(runs),
    )


def render_report(r: Report) -> str:
    rate = "n/a" if r.agent_approval_rate is None else f"{r.agent_approval_rate:.0%}"
    return "\n".join(
        [
            "governance report",
            "initiator breakdown:",
            f"  agent-initiated check-ins: {r.agent_initiated} ({rate} approved)",
            f"  policy check-ins: {r.policy_checkins} "
            f"({r.deliberate_approvals} deliberate approvals, {r.denials} denials)",
            f"auto-approved: {r.silent_approvals} silent, {r.flagged_approvals} flagged",
            f"blocked by hard constraints: {r.blocked}",
            f"verification: {r.verification_passed}/{r.verification_total} passes",
        ]
    )


def revoke_preference_topic(
    topic: str | ChangeCategory, prefs: PreferenceStore, traces: TraceStore, session_id: str = "observe"
) -> str:
    category = prefs.revoke_topic(topic, traces, session_id)
    return (
        f"revoked topic {category.value}: future {category.value} changes always check in; "
        "accumulated states preserved"
    )
