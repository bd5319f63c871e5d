"""One governed agent session.

The loop asks the adapter for its next move, routes proposals through the
cascade, interrupts the developer when needed, trains the policy on every
developer decision, and finally reports check-ins split by initiator.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence, TextIO, Union

from .core import (
    ActionKind,
    ActionProposal,
    ChangeCategory,
    Decision,
    EventKind,
    Initiator,
    InvalidProposal,
    Phase,
    Route,
    Verdict,
    decode_enum,
    validate_proposal,
)
from .governance import CascadeOutcome, Tier, evaluate
from .memory import decision_payload
from .policy import SessionStats, SimilarityKey, extract_features, sgd_update, similarity_key
from .workspace import Stores

MAX_RETRIES = 3


class AdapterFailure(RuntimeError):
    pass


class VerificationCommandMissing(RuntimeError):
    pass


class CommandNotFound(RuntimeError):
    pass


class EndOfInput(EOFError):
    pass


class CheckInReason(str, Enum):
    UNCERTAINTY = "uncertainty"
    GUIDANCE_CONFLICT = "guidance_conflict"
    PLAN_DEVIATION = "plan_deviation"
    DESIGN_TRADEOFF = "design_tradeoff"


@dataclass(frozen=True)
class PromptContext:
    """What the agent gets to see. There is deliberately no slot for scores or weights."""

    task: str
    phase: Phase
    guidance: tuple[str, ...] = ()
    spec_digest: str | None = None
    approved_plan: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["phase"] = self.phase.value
        d["guidance"] = list(self.guidance)
        return d

    def render(self) -> str:
        parts = [f"Task: {self.task}", f"Phase: {self.phase.value}"]
        if self.spec_digest:
            parts.append(f"Spec digest: {self.spec_digest}")
        if self.approved_plan:
            parts.append(f"Approved plan: {self.approved_plan}")
        if self.guidance:
            parts.append("Relevant guidance:")
            parts.extend(f"- {g}" for g in self.guidance)
        return "\n".join(parts)


@dataclass(frozen=True)
class AgentCheckInRequest:
    reason: CheckInReason
    question: str
    options: tuple[str, ...] = ()


class _Done:
    def __repr__(self) -> str:
        return "DONE"


DONE = _Done()
AgentAction = Union[ActionProposal, AgentCheckInRequest, _Done]


class AgentAdapter(Protocol):
    def next_action(self, context: PromptContext) -> AgentAction: ...

    def receive_feedback(self, decision: Decision, developer_text: str | None) -> None: ...


def parse_action(item: Mapping[str, Any]) -> AgentAction:
    kind = item.get("type", "proposal")
    if kind == "done":
        return DONE
    if kind == "check_in":
        return AgentCheckInRequest(
            reason=decode_enum(CheckInReason, item["reason"]),
            question=str(item["question"]),
            options=tuple(item.get("options", ())),
        )
    if kind == "proposal":
        return ActionProposal.from_dict(item)
    raise AdapterFailure(f"unknown scripted action type {kind!r}")


class ScriptedAgentAdapter:
    """Replays a fixture of proposals and check-in requests in order."""

    def __init__(self, actions: Iterable[Mapping[str, Any] | AgentAction], task: str = "") -> None:
        self.actions = [a if not isinstance(a, Mapping) else parse_action(a) for a in actions]
        self.task = task
        self.contexts: list[PromptContext] = []
        self.feedback: list[tuple[Decision, str | None]] = []
        self._pos = 0

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptedAgentAdapter":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["actions"], task=doc.get("task", ""))

    def next_action(self, context: PromptContext) -> AgentAction:
        self.contexts.append(context)
        if self._pos >= len(self.actions):
            return DONE
        action = self.actions[self._pos]
        self._pos += 1
        return action

    def receive_feedback(self, decision: Decision, developer_text: str | None) -> None:
        self.feedback.append((decision, developer_text))


_ACTION_LINE = "ACTION"


def parse_action_text(text: str, next_id: int) -> AgentAction:
    """Parse the delimited action grammar a remote agent answers with.

    ::

        ACTION apply
        PATHS task_api/api.py, task_api/service.py
        CATEGORY api
        DIFF_LINES 14
        CONFIDENCE 0.8
        PHASE implementation
        RATIONALE add summary handler

    ``CHECKIN <reason>: <question> | option | option`` and ``DONE`` are the
    other two forms.
    """
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise AdapterFailure("empty agent response")
    head = lines[0]
    if head.upper() == "DONE":
        return DONE
    if head.upper().startswith("CHECKIN"):
        body = head[len("CHECKIN"):].strip()
        reason, _, rest = body.partition(":")
        question, *options = [p.strip() for p in rest.split("|")]
        return AgentCheckInRequest(decode_enum(CheckInReason, reason.strip()), question, tuple(options))
    fields: dict[str, str] = {}
    for ln in lines:
        key, _, value = ln.partition(" ")
        fields[key.upper()] = value.strip()
    if _ACTION_LINE not in fields:
        raise AdapterFailure(f"agent response has no ACTION line: {head!r}")
    paths = [p.strip() for p in fields.get("PATHS", "").split(",") if p.strip()]
    try:
        return ActionProposal(
            id=next_id,
            action_kind=decode_enum(ActionKind, fields[_ACTION_LINE]),
            paths=tuple(paths),
            change_category=decode_enum(ChangeCategory, fields.get("CATEGORY", "general")),
            diff_lines=int(fields.get("DIFF_LINES", "0")),
            files_touched=len(dict.fromkeys(paths)),
            model_confidence=float(fields.get("CONFIDENCE", "0.5")),
            phase=decode_enum(Phase, fields.get("PHASE", "research")),
            rationale=fields.get("RATIONALE", ""),
        )
    except ValueError as exc:
        raise AdapterFailure(f"malformed agent response: {exc}") from exc


class RemoteAgentAdapter:
    """Chat-completion backed agent. Not exercised against a live service in tests."""

    def __init__(self, endpoint: str, model: str = "", api_key: str | None = None,
                 timeout: float = 120.0) -> None:
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.history: list[dict[str, str]] = []
        self._next_id = 1

    def _post(self, messages: list[dict[str, str]]) -> str:
        body = json.dumps({"model": self.model, "messages": messages}).encode()
        req = urllib.request.Request(self.endpoint, data=body, method="POST")
        req.add_header("Content-Type", "application/json")
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            doc = json.loads(resp.read().decode())
        return doc["choices"][0]["message"]["content"]

    def next_action(self, context: PromptContext) -> AgentAction:
        self.history.append({"role": "user", "content": context.render()})
        text = self._post(self.history)
        self.history.append({"role": "assistant", "content": text})
        action = parse_action_text(text, self._next_id)
        if isinstance(action, ActionProposal):
            self._next_id += 1
        return action

    def receive_feedback(self, decision: Decision, developer_text: str | None) -> None:
        note = f"Developer decision: {decision.verdict.value}"
        if developer_text:
            note += f". Note: {developer_text}"
        self.history.append({"role": "user", "content": note})


# -- developer input -------------------------------------------------------------


class Responder(Protocol):
    def ask(self, prompt: str) -> str: ...


class ScriptedResponder:
    """Answers from a list such as ``["r", "c: use the nested response", "a"]``."""

    def __init__(self, answers: Iterable[str | Mapping[str, str]], echo: TextIO | None = None) -> None:
        self._answers = [self._flatten(a) for a in answers]
        self.prompts: list[str] = []
        self.echo = echo

    @staticmethod
    def _flatten(answer: str | Mapping[str, str]) -> str:
        if isinstance(answer, Mapping):
            text = answer.get("text")
            return f"{answer['key']}: {text}" if text else str(answer["key"])
        return answer

    @classmethod
    def from_file(cls, path: Path | str, echo: TextIO | None = None) -> "ScriptedResponder":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["answers"] if isinstance(doc, dict) else doc, echo=echo)

    @property
    def remaining(self) -> int:
        return len(self._answers)

    def ask(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if not self._answers:
            raise EndOfInput("scripted responder has no answers left")
        answer = self._answers.pop(0)
        if self.echo is not None:
            self.echo.write(f"{prompt}{answer}\n")
        return answer


class AutoApproveResponder:
    def __init__(self) -> None:
        self.prompts: list[str] = []

    def ask(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return "a"


class TerminalResponder:
    def __init__(self, stdin: TextIO | None = None, stdout: TextIO | None = None) -> None:
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout

    def ask(self, prompt: str) -> str:
        self.stdout.write(prompt)
        self.stdout.flush()
        line = self.stdin.readline()
        if not line:
            raise EndOfInput("stdin closed")
        return line.rstrip("\n")


_KEYS = {
    "a": Verdict.APPROVED,
    "r": Verdict.APPROVED_REMEMBERED,
    "d": Verdict.DENIED,
    "c": Verdict.CORRECTED_THEN_APPROVED,
}
_MAX_PROMPTS = 5


def parse_answer(raw: str) -> tuple[Verdict, str | None] | None:
    raw = raw.strip()
    if not raw:
        return None
    key, text = raw[0].lower(), raw[1:].lstrip(" :").strip()
    if key not in _KEYS or (len(raw) > 1 and raw[1].isalpha()):
        return None
    if key == "c" and not text:
        return None
    return _KEYS[key], (text or None)


def conduct_checkin(
    title: str,
    explanation: str,
    responder: Responder,
    out: TextIO | None = None,
    options: Sequence[str] = (),
) -> tuple[Verdict, str | None]:
    """Show why we are asking, then read a / r / d / c <text>.

    With options, answering a number approves and returns the chosen option as text.
    """
    lines = [f"? {title}", f"  why: {explanation}"]
    lines.extend(f"  [{i}] {opt}" for i, opt in enumerate(options, 1))
    lines.append("  [a]pprove  [r]emember  [d]eny  [c] <correction>")
    prompt = "\n".join(lines) + "\n> "
    for _ in range(_MAX_PROMPTS):
        raw = responder.ask(prompt)
        if options and raw.strip().isdigit() and 1 <= int(raw) <= len(options):
            choice = options[int(raw) - 1]
            _emit(out, f"  -> option {raw}: {choice}")
            return Verdict.APPROVED, choice
        parsed = parse_answer(raw)
        if parsed is not None:
            _emit(out, f"  -> {parsed[0].value}")
            return parsed
        prompt = "  please answer a, r, d, or c <correction text>\n> "
    raise EndOfInput("no valid answer after repeated prompts")


def _emit(out: TextIO | None, line: str) -> None:
    if out is not None:
        out.write(line + "\n")


# -- verification ----------------------------------------------------------------


@dataclass(frozen=True)
class VerificationResult:
    passed: bool
    command: str
    details: str = ""


def run_verification(command: str, cwd: Path | None = None, timeout: float = 600.0) -> VerificationResult:
    if not command or not command.strip():
        raise VerificationCommandMissing("no verification command configured")
    try:
        proc = subprocess.run(
            shlex.split(command), cwd=cwd, capture_output=True, text=True, timeout=timeout
        )
    except FileNotFoundError as exc:
        raise CommandNotFound(f"verification command not found: {command}") from exc
    tail = (proc.stdout + proc.stderr).strip().splitlines()[-5:]
    return VerificationResult(proc.returncode == 0, command, "\n".join(tail))


# -- the session -----------------------------------------------------------------


@dataclass
class SessionSummary:
    session_id: str
    policy_initiated_checkins: int = 0
    agent_initiated_checkins: int = 0
    silent_approvals: int = 0
    blocked: int = 0
    flagged_items: list[str] = field(default_factory=list)
    verification_results: list[bool] = field(default_factory=list)
    decisions: list[Decision] = field(default_factory=list)
    incomplete: bool = False

    @property
    def proposals(self) -> int:
        return sum(1 for d in self.decisions if d.initiator is not Initiator.AGENT_INITIATED)

    @property
    def checkin_line(self) -> str:
        return (
            f"Check-ins: {self.policy_initiated_checkins} policy-initiated, "
            f"{self.agent_initiated_checkins} agent-initiated"
        )

    def exit_code(self) -> int:
        if self.incomplete:
            return 4
        if any(not ok for ok in self.verification_results):
            return 3
        if self.proposals and self.blocked == self.proposals:
            return 2
        return 0

    def render(self) -> str:
        lines = [f"session {self.session_id} summary", self.checkin_line]
        lines.append(f"silent approvals: {self.silent_approvals}; blocked: {self.blocked}")
        lines.extend(f"flagged: {item}" for item in self.flagged_items)
        if self.verification_results:
            ok = sum(self.verification_results)
            lines.append(f"verification: {ok}/{len(self.verification_results)} passed")
        if self.incomplete:
            lines.append("INCOMPLETE: session aborted before the agent finished")
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "policy_initiated_checkins": self.policy_initiated_checkins,
            "agent_initiated_checkins": self.agent_initiated_checkins,
            "silent_approvals": self.silent_approvals,
            "blocked": self.blocked,
            "flagged_items": list(self.flagged_items),
            "verification_results": list(self.verification_results),
            "decisions": [d.to_dict() for d in self.decisions],
            "incomplete": self.incomplete,
        }


def _describe(p: ActionProposal) -> str:
    where = ", ".join(p.paths) if p.paths else "(no paths)"
    text = f"{p.action_kind.value} [{p.change_category.value}] {where}"
    if p.diff_lines:
        text += f" (+/-{p.diff_lines})"
    if p.rationale:
        text += f" - {p.rationale}"
    return text


def _abbrev(text: str, limit: int = 60) -> str:
    return text if len(text) <= limit else text[: limit - 3].rstrip() + "..."


class _Session:
    def __init__(self, task: str, adapter: AgentAdapter, stores: Stores, responder: Responder,
                 out: TextIO | None, session_id: str, spec_digest: str | None) -> None:
        self.task = task
        self.adapter = adapter
        self.stores = stores
        self.responder = responder
        self.out = out
        self.session_id = session_id
        self.spec_digest = spec_digest
        self.phase = Phase.RESEARCH
        self.approved_plan: str | None = None
        self.stats = SessionStats()
        self.denials: Counter[int] = Counter()
        self.summary = SessionSummary(session_id)
        self.applied = False

    @property
    def traces(self):
        return self.stores.traces

    def context(self) -> PromptContext:
        k = int(self.stores.config.get("retrieval_k", 3))
        snippets = self.stores.guidance.retrieve(self.task, k)
        return PromptContext(
            task=self.task,
            phase=self.phase,
            guidance=tuple(s.text for s in snippets),
            spec_digest=self.spec_digest,
            approved_plan=self.approved_plan,
        )

    def record_decision(
        self,
        verdict: Verdict,
        initiator: Initiator,
        route: Route,
        score: float | None,
        proposal: ActionProposal | None,
        **extra: Any,
    ) -> Decision:
        decision = Decision(
            proposal_id=proposal.id if proposal else 0,
            verdict=verdict,
            initiator=initiator,
            score=score,
            timestamp=self.traces.next_timestamp(),
            route=route,
        )
        key = similarity_key(proposal) if proposal else SimilarityKey(ChangeCategory.GENERAL, "")
        payload = decision_payload(
            decision,
            key,
            proposal.action_kind if proposal else None,
            proposal.paths if proposal else (),
            **extra,
        )
        self.traces.record(EventKind.DECISION_MADE, payload, self.session_id)
        self.summary.decisions.append(decision)
        return decision

    def store_correction(self, text: str, source: str) -> None:
        self.stores.guidance.add(text, source=source)
        self.traces.record(EventKind.CORRECTION_GIVEN, {"text": text, "source": source}, self.session_id)

    def developer_decided(self, verdict: Verdict) -> None:
        self.stats = SessionStats(
            self.stats.approvals + (1 if verdict.is_approval else 0), self.stats.decisions + 1
        )

    # -- handlers --------------------------------------------------------------

    def handle_checkin_request(self, req: AgentCheckInRequest) -> None:
        verdict, text = conduct_checkin(
            f"agent check-in ({req.reason.value}): {req.question}",
            f"the agent paused on its own: {req.reason.value.replace('_', ' ')}",
            self.responder,
            self.out,
            req.options,
        )
        self.summary.agent_initiated_checkins += 1
        decision = self.record_decision(
            verdict, Initiator.AGENT_INITIATED, Route.LIVE_CHECK_IN, None, None,
            reason=req.reason.value,
        )
        self.developer_decided(verdict)
        if verdict is Verdict.CORRECTED_THEN_APPROVED and text:
            self.store_correction(text, source=f"correction:{self.session_id}")
        self.adapter.receive_feedback(decision, text)

    def handle_proposal(self, p: ActionProposal) -> None:
        try:
            validate_proposal(p)
        except InvalidProposal as exc:
            raise AdapterFailure(f"adapter produced an invalid proposal: {exc}") from exc
        regressed = p.phase.order < self.phase.order
        if not regressed:
            self.phase = p.phase
        granted = self.traces.is_granted(p.action_kind, p.unique_paths, self.session_id)
        outcome = evaluate(
            p,
            self.stores.constraints,
            self.stores.preferences.active,
            self.stores.policy,
            self.stores.thresholds,
            self.traces,
            session=self.stats,
            revoked=self.stores.preferences.revoked_topics,
            granted=granted,
        )
        if self.denials[p.id] >= MAX_RETRIES:
            outcome = CascadeOutcome(
                Route.BLOCKED, Initiator.POLICY_INITIATED, None,
                f"proposal {p.id} was denied {MAX_RETRIES} times; not retrying", Tier.HARD_CONSTRAINT,
            )
        elif regressed and outcome.route is not Route.BLOCKED and outcome.tier is not Tier.HARD_CONSTRAINT:
            outcome = CascadeOutcome(
                Route.LIVE_CHECK_IN, Initiator.POLICY_INITIATED, outcome.score,
                f"phase gate: returning from {self.phase.value} to {p.phase.value}",
                Tier.PHASE_GATE, outcome.features, outcome.counts,
            )

        if outcome.route is Route.BLOCKED:
            self.summary.blocked += 1
            _emit(self.out, f"blocked: {_describe(p)} ({outcome.explanation})")
            decision = self.record_decision(
                Verdict.DENIED, Initiator.POLICY_INITIATED, Route.BLOCKED, None, p,
                tier=outcome.tier.value,
            )
            self.adapter.receive_feedback(decision, outcome.explanation)
            return

        if outcome.route is Route.LIVE_CHECK_IN:
            verdict, text = conduct_checkin(_describe(p), outcome.explanation, self.responder, self.out)
            self.summary.policy_initiated_checkins += 1
            decision = self.record_decision(
                verdict, Initiator.POLICY_INITIATED, Route.LIVE_CHECK_IN, outcome.score, p,
                tier=outcome.tier.value,
            )
            x = outcome.features or extract_features(p, self.traces, self.stats)
            self.stores.policy = sgd_update(self.stores.policy, x, 1 if verdict.is_approval else 0)
            self.developer_decided(verdict)
            if verdict is Verdict.DENIED:
                self.denials[p.id] += 1
            if verdict is Verdict.CORRECTED_THEN_APPROVED and text:
                self.store_correction(text, source=f"correction:{self.session_id}")
            self.adapter.receive_feedback(decision, text)
            if verdict.is_approval:
                self.executed(p)
            return

        assert outcome.score is not None
        if outcome.route is Route.FLAGGED_APPROVE:
            line = f"{_describe(p)} [{outcome.explanation}]"
            self.summary.flagged_items.append(line)
            _emit(self.out, f"flagged: {line}")
            initiator = Initiator.FLAGGED_AUTO
        else:
            self.summary.silent_approvals += 1
            initiator = Initiator.SILENT_AUTO
            if outcome.tier is Tier.REMEMBERED_GRANT and p.action_kind is ActionKind.READ:
                self.read_banner(p, outcome)
        decision = self.record_decision(
            Verdict.APPROVED, initiator, outcome.route, outcome.score, p, tier=outcome.tier.value
        )
        self.adapter.receive_feedback(decision, None)
        self.executed(p)

    def read_banner(self, p: ActionProposal, outcome: CascadeOutcome) -> None:
        n = len(p.unique_paths)
        approvals, denials = outcome.counts or (0, 0)
        line = (
            f"read: reused prior read access on {n}/{n} files; "
            f"prior approvals {approvals}; prior denials {denials}"
        )
        snippets = self.stores.guidance.retrieve(self.task, 1)
        if snippets:
            line += f" -- guidance: '{_abbrev(snippets[0].text)}'"
        _emit(self.out, line)

    def executed(self, p: ActionProposal) -> None:
        if p.action_kind is ActionKind.PLAN:
            self.approved_plan = p.rationale or _describe(p)
        if p.action_kind is ActionKind.APPLY:
            self.applied = True

    def verify(self) -> None:
        if self.phase not in (Phase.IMPLEMENTATION, Phase.REVIEW):
            return
        command = self.stores.config.get("verification_command")
        if not command:
            if self.stores.config.get("require_verification"):
                raise VerificationCommandMissing("config requires verification but sets no command")
            return
        result = run_verification(command, cwd=self.stores.repo_root)
        self.summary.verification_results.append(result.passed)
        self.traces.record(
            EventKind.VERIFICATION_RUN,
            {"passed": result.passed, "command": result.command, "details": result.details},
            self.session_id,
        )
        _emit(self.out, f"verification: {'pass' if result.passed else 'FAIL'} ({command})")

    def run(self) -> SessionSummary:
        try:
            while True:
                try:
                    action = self.adapter.next_action(self.context())
                except (AdapterFailure, EndOfInput):
                    raise
                except Exception as exc:
                    raise AdapterFailure(f"adapter raised {exc!r}") from exc
                if action is DONE:
                    break
                if isinstance(action, AgentCheckInRequest):
                    self.handle_checkin_request(action)
                elif isinstance(action, ActionProposal):
                    self.handle_proposal(action)
                else:
                    raise AdapterFailure(f"adapter returned {action!r}")
            self.verify()
        except EndOfInput as exc:
            self.summary.incomplete = True
            _emit(self.out, f"aborted: {exc}")
        finally:
            self.stores.save_policy()
        _emit(self.out, self.summary.render())
        return self.summary


def next_session_id(stores: Stores) -> str:
    existing = {s for s in stores.traces.sessions() if s.startswith("s") and s[1:].isdigit()}
    n = 1
    while f"s{n}" in existing:
        n += 1
    return f"s{n}"


def run_session(
    task: str,
    adapter: AgentAdapter,
    stores: Stores,
    responder: Responder,
    *,
    out: TextIO | None = None,
    session_id: str | None = None,
    spec_digest: str | None = None,
) -> SessionSummary:
    """Drive ``adapter`` to completion under governance and return the summary.

    Raises :class:`AdapterFailure` if the adapter misbehaves. A responder that
    runs dry ends the session early with ``summary.incomplete`` set.
    """
    sid = session_id or next_session_id(stores)
    return _Session(task, adapter, stores, responder, out, sid, spec_digest).run()
