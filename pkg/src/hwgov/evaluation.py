"""Synthetic personas, trust-database seeding, and fixture replay scored against oracle labels."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, TextIO

from .core import (
    FEATURE_NAMES,
    ActionKind,
    ActionProposal,
    AutonomyPreference,
    ChangeCategory,
    Decision,
    EventKind,
    FeatureVector,
    Initiator,
    Phase,
    PreferenceName,
    Route,
    Verdict,
)
from .memory import decision_payload
from .policy import (
    PolicyState,
    SessionStats,
    encode,
    extract_features,
    is_security_path,
    score,
    sgd_update,
    similarity_key,
    warm_start,
)
from .session import (
    AutoApproveResponder,
    ScriptedAgentAdapter,
    ScriptedResponder,
    SessionSummary,
    run_session,
)
from .workspace import Stores

PREFERENCE_APPROVAL_RATE = 0.90
REPLAY_FACTOR = 3
TABLE1_FIXTURE = "table1_tasks.json"
PRESEED_FIXTURE = "walkthrough_preseed.json"
WALKTHROUGH_SESSIONS = (
    ("walkthrough_session1.json", "walkthrough_session1_answers.json"),
    ("walkthrough_session2.json", "walkthrough_session2_answers.json"),
)
DEVIATION_FEATURES = (
    "change_pattern_risk",
    "model_confidence_avg",
    "is_security_sensitive",
    "prior_denials_norm",
)


class Persona(str, Enum):
    CAUTIOUS = "cautious"
    PERMISSIVE = "permissive"
    MIXED = "mixed"


@dataclass(frozen=True)
class Scenario:
    """A proposal plus the history it was seen against."""

    category: ChangeCategory
    paths: tuple[str, ...]
    diff_lines: int
    confidence: float
    approvals: int = 0
    denials: int = 0
    first_touch: bool = False
    note: str = ""

    @property
    def files(self) -> int:
        return len(dict.fromkeys(self.paths))

    @property
    def security_sensitive(self) -> bool:
        return self.category is ChangeCategory.SECURITY or any(is_security_path(p) for p in self.paths)

    @property
    def large_multi_file(self) -> bool:
        return self.files >= 4 and self.diff_lines >= 200


def _s(category: str, paths: str, diff: int, conf: float, a: int = 0, d: int = 0,
       first: bool = False, note: str = "") -> Scenario:
    return Scenario(ChangeCategory(category), tuple(paths.split()), diff, conf, a, d, first, note)


def cautious_rule(s: Scenario) -> bool:
    """Deny API, data-model, config and anything security sensitive; approve the rest."""
    risky = {ChangeCategory.API, ChangeCategory.DATA_MODEL, ChangeCategory.CONFIG, ChangeCategory.SECURITY}
    return not (s.category in risky or s.security_sensitive)


def permissive_rule(s: Scenario) -> bool:
    """Approve everything except a sprawling refactor that reaches security code."""
    return not (s.security_sensitive and s.files >= 8 and s.diff_lines >= 500)


def mixed_rule(s: Scenario) -> bool:
    """Tests and docs always pass; large multi-file diffs and security changes do not."""
    if s.category in (ChangeCategory.TEST, ChangeCategory.DOC):
        return True
    return not (s.large_multi_file or s.security_sensitive)


# Scenario catalogues: 20 situations per persona. Counts describe the history
# each situation was seen against, not the order of seeding. Denied situations
# tend to be ones the engineering priors already distrust; what moves the
# coefficients is where a persona disagrees with those priors.
_CAUTIOUS = (
    _s("api", "task_api/api.py", 300, 0.15, d=10, first=True, note="new public endpoint"),
    _s("api", "task_api/service.py task_api/api.py", 360, 0.2, d=10, note="new public function + handler"),
    _s("api", "task_api/api.py", 180, 0.3, d=10, note="handler signature change"),
    _s("api", "task_api/service.py", 160, 0.25, d=10, first=True, note="service signature change"),
    _s("data_model", "task_api/models.py", 320, 0.25, d=10, note="schema field rename"),
    _s("data_model", "task_api/models.py migrations/0002_priority.py", 600, 0.2, d=10, first=True,
       note="migration"),
    _s("config", "config/settings.py", 240, 0.15, d=10, note="settings rework"),
    _s("config", "config/prod/app.yaml", 120, 0.25, d=10, first=True, note="prod config"),
    _s("security", "task_api/auth.py", 160, 0.2, d=10, first=True, note="token check change"),
    _s("test", "tests/test_service.py tests/test_api.py tests/test_models.py tests/conftest.py", 420, 0.4,
       first=True, note="large test-generation diff, approved: change pattern risk is low"),
    _s("test", "tests/test_api.py", 60, 0.35, a=1, first=True),
    _s("test", "tests/test_models.py", 35, 0.4, first=True),
    _s("doc", "docs/api.md", 40, 0.35, first=True),
    _s("doc", "README.md docs/usage.md", 80, 0.4, first=True),
    _s("general", "task_api/utils.py task_api/storage.py", 90, 0.35, first=True, note="utility refactor"),
    _s("general", "task_api/service.py", 50, 0.4, a=1, note="internal helper, no signature change"),
    _s("general", "scripts/dev.py", 60, 0.3, first=True),
    _s("general", "task_api/storage.py task_api/validation.py task_api/utils.py", 120, 0.35, first=True),
    _s("general", "task_api/validation.py", 30, 0.4, a=1),
    _s("doc", "docs/dev.md", 25, 0.35, first=True),
)

_PERMISSIVE = (
    _s("api", "task_api/api.py", 12, 0.97, a=10, note="handler tweak"),
    _s("api", "task_api/service.py", 10, 0.97, a=10),
    _s("data_model", "task_api/models.py", 14, 0.96, a=10),
    _s("config", "config/settings.py", 4, 0.97, a=10),
    _s("general", "task_api/utils.py", 12, 0.92, a=6),
    _s("general", "task_api/service.py", 30, 0.92, a=5),
    _s("general", "task_api/storage.py", 40, 0.9, a=4),
    _s("general", "task_api/validation.py", 20, 0.92, a=4),
    _s("general", "scripts/dev.py", 20, 0.9, a=2, first=True),
    _s("general", "task_api/routes.py", 18, 0.92, a=3),
    _s("general", "task_api/service.py task_api/storage.py task_api/utils.py", 150, 0.9, a=4),
    _s("test", "tests/test_api.py", 40, 0.93, a=5),
    _s("doc", " ".join(f"docs/guide/{n}.md" for n in "abcdefghij"), 900, 0.9, first=True,
       note="documentation overhaul"),
    _s("test", "tests/test_service.py tests/test_api.py tests/test_models.py tests/conftest.py", 420, 0.9, a=4),
    _s("doc", "README.md " + " ".join(f"docs/dev/{n}.md" for n in "abcdef"), 500, 0.9, first=True),
    _s("doc", "docs/api.md", 30, 0.94, a=4),
    _s("doc", " ".join(f"docs/ops/{n}.md" for n in "abcdefghi"), 800, 0.9, first=True),
    _s("doc", " ".join(f"docs/api/{n}.md" for n in "abcdefgh"), 700, 0.9, first=True, note="new docs pages"),
    _s("general", "task_api/models.py task_api/utils.py", 60, 0.9, a=3),
    _s(
        "general",
        "task_api/auth.py task_api/session.py task_api/api.py task_api/service.py task_api/models.py "
        "task_api/storage.py task_api/utils.py task_api/validation.py task_api/routes.py tests/test_api.py",
        1400, 0.45, a=10, d=1, note="extreme multi-file refactor reaching auth code",
    ),
)

_MIXED = (
    _s("test", "tests/test_api.py", 40, 0.9, a=3),
    _s("test", "tests/test_service.py tests/test_api.py tests/test_models.py tests/conftest.py", 420, 0.88, a=2),
    _s("test", "tests/test_utils.py", 16, 0.92, first=True),
    _s("doc", "docs/api.md", 30, 0.9, a=3),
    _s("doc", "README.md docs/usage.md docs/api.md docs/dev.md", 260, 0.86, a=1),
    _s("doc", "docs/usage.md", 12, 0.94, a=4),
    _s("api", "task_api/api.py", 16, 0.7, first=True, note="small handler change"),
    _s("api", "task_api/service.py", 14, 0.7, first=True),
    _s("config", "config/settings.py", 8, 0.7, first=True),
    _s("data_model", "task_api/models.py", 18, 0.7, first=True),
    _s("general", "task_api/utils.py", 12, 0.9, a=4),
    _s("general", "task_api/service.py", 40, 0.87, a=3),
    _s("general", "scripts/dev.py", 20, 0.88, first=True),
    _s("general", "task_api/validation.py", 24, 0.86, a=2),
    _s("api", "task_api/api.py task_api/service.py task_api/models.py task_api/storage.py", 380, 0.3,
       d=10, first=True, note="large multi-file API rework"),
    _s("general", "task_api/service.py task_api/storage.py task_api/utils.py task_api/validation.py"
       " scripts/dev.py", 520, 0.1, d=10, first=True, note="sweeping refactor"),
    _s("data_model", "task_api/models.py migrations/0002_priority.py migrations/0003_index.py task_api/storage.py",
       300, 0.3, d=10, first=True),
    _s("config", "config/settings.py config/logging.yaml config/prod/app.yaml deploy/compose.yaml", 240, 0.3,
       d=10, first=True),
    _s("security", "task_api/auth.py", 30, 0.3, d=10, first=True, note="auth helper"),
    _s("general", "task_api/storage.py", 26, 0.84, a=1),
)


@dataclass(frozen=True)
class PersonaProfile:
    name: Persona
    rule: Callable[[Scenario], bool]
    scenarios: tuple[Scenario, ...]
    decision_count: int = 20
    replay_factor: int = REPLAY_FACTOR

    def __post_init__(self) -> None:
        if len(self.scenarios) != self.decision_count:
            raise ValueError(f"{self.name.value}: need {self.decision_count} scenarios")

    @property
    def approval_rate(self) -> float:
        if not self.scenarios:
            return 0.0
        return sum(self.rule(s) for s in self.scenarios) / len(self.scenarios)


PERSONAS: dict[Persona, PersonaProfile] = {
    Persona.CAUTIOUS: PersonaProfile(Persona.CAUTIOUS, cautious_rule, _CAUTIOUS),
    Persona.PERMISSIVE: PersonaProfile(Persona.PERMISSIVE, permissive_rule, _PERMISSIVE),
    Persona.MIXED: PersonaProfile(Persona.MIXED, mixed_rule, _MIXED),
}


def persona(name: str | Persona) -> PersonaProfile:
    return PERSONAS[Persona(name)]


@dataclass(frozen=True)
class SeedDecision:
    features: FeatureVector
    label: int
    proposal: ActionProposal
    note: str = ""

    def __iter__(self):
        # unpacks as (features, label)
        return iter((self.features, self.label))


def generate_persona_decisions(profile: PersonaProfile, seed: int = 0) -> list[SeedDecision]:
    """Instantiate each scenario as a feature vector and label it with the persona's rule.

    The seed perturbs diff sizes and confidences slightly and fixes the order;
    labels never depend on it.
    """
    rng = random.Random(f"{profile.name.value}:{seed}")
    out: list[SeedDecision] = []
    for i, s in enumerate(profile.scenarios, 1):
        diff = max(1, round(s.diff_lines * rng.uniform(0.9, 1.1)))
        conf = min(1.0, max(0.0, round(s.confidence + rng.uniform(-0.03, 0.03), 4)))
        p = ActionProposal(
            id=i,
            action_kind=ActionKind.APPLY,
            paths=s.paths,
            change_category=s.category,
            diff_lines=diff,
            files_touched=s.files,
            model_confidence=conf,
            phase=Phase.IMPLEMENTATION,
            rationale=s.note,
        )
        label = 1 if profile.rule(s) else 0
        x = encode(p, approvals=s.approvals, denials=s.denials, first_touch=s.first_touch,
                   session_rate=0.5)
        out.append(SeedDecision(x, label, p, s.note))
    rng.shuffle(out)
    return out


def infer_preferences(approval_rate: float) -> list[AutonomyPreference]:
    if approval_rate >= PREFERENCE_APPROVAL_RATE:
        return [
            AutonomyPreference(PreferenceName.PREFER_FEWER_CHECKINS),
            AutonomyPreference(PreferenceName.SKIP_LOW_RISK_PLAN_CHECKPOINT),
        ]
    return []


def train_on(state: PolicyState, decisions: Sequence[SeedDecision], replay: int = REPLAY_FACTOR) -> PolicyState:
    for _ in range(replay):
        for d in decisions:
            state = sgd_update(state, d.features, d.label)
    return state


def seed_repo(
    profile: PersonaProfile, stores: Stores, seed: int = 0
) -> tuple[PolicyState, list[AutonomyPreference]]:
    """Write the persona's decisions into the trust database and train on them."""
    decisions = generate_persona_decisions(profile, seed)
    session_id = f"seed-{profile.name.value}"
    state = stores.policy
    for _ in range(profile.replay_factor):
        for d in decisions:
            verdict = Verdict.APPROVED if d.label else Verdict.DENIED
            decision = Decision(
                proposal_id=d.proposal.id,
                verdict=verdict,
                initiator=Initiator.POLICY_INITIATED,
                score=None,
                timestamp=stores.traces.next_timestamp(),
                route=Route.LIVE_CHECK_IN,
            )
            payload = decision_payload(
                decision, similarity_key(d.proposal), d.proposal.action_kind, d.proposal.paths,
                seeded=True,
            )
            stores.traces.record(EventKind.DECISION_MADE, payload, session_id)
            state = sgd_update(state, d.features, d.label)
    stores.policy = state
    rate = sum(d.label for d in decisions) / len(decisions) if decisions else 0.0
    prefs = infer_preferences(rate)
    for pref in prefs:
        stores.preferences.record(pref, stores.traces, session_id)
    stores.save_policy()
    return state, prefs


# -- walkthrough history ---------------------------------------------------------


def seed_history(stores: Stores, path: Path | str | None = None, session_id: str = "preseed") -> int:
    """Replay a recorded decision history into the stores; returns decisions written.

    Features are extracted against the history as it grows, so counts and
    first-touch flags match what a live run would have seen. Only entries routed
    to a live check-in train the policy, as in a real session.
    """
    doc = read_fixture(path if path is not None else PRESEED_FIXTURE)
    stats = SessionStats()
    for entry in doc["decisions"]:
        p = ActionProposal.from_dict(entry)
        verdict = Verdict(entry["verdict"])
        route = Route(entry["route"])
        x = extract_features(p, stores.traces, stats)
        s = score(stores.policy, x)
        live = route is Route.LIVE_CHECK_IN
        decision = Decision(
            proposal_id=p.id,
            verdict=verdict,
            initiator=Initiator.POLICY_INITIATED if live else _AUTO_INITIATOR[route],
            score=s,
            timestamp=stores.traces.next_timestamp(),
            route=route,
        )
        payload = decision_payload(decision, similarity_key(p), p.action_kind, p.paths, seeded=True)
        stores.traces.record(EventKind.DECISION_MADE, payload, session_id)
        if live:
            stores.policy = sgd_update(stores.policy, x, 1 if verdict.is_approval else 0)
            stats = SessionStats(stats.approvals + verdict.is_approval, stats.decisions + 1)
    for passed in doc.get("verifications", ()):
        stores.traces.record(
            EventKind.VERIFICATION_RUN, {"passed": bool(passed), "command": "seeded"}, session_id
        )
    stores.save_policy()
    return len(doc["decisions"])


_AUTO_INITIATOR = {Route.SILENT_APPROVE: Initiator.SILENT_AUTO, Route.FLAGGED_APPROVE: Initiator.FLAGGED_AUTO}


def scripted_session(actions: Path | str, answers: Path | str) -> tuple[str, ScriptedAgentAdapter, ScriptedResponder]:
    doc = read_fixture(actions)
    adapter = ScriptedAgentAdapter(doc["actions"], task=doc.get("task", ""))
    ans = read_fixture(answers)
    return adapter.task, adapter, ScriptedResponder(ans["answers"] if isinstance(ans, dict) else ans)


def run_walkthrough(stores: Stores, out: TextIO | None = None) -> list[SessionSummary]:
    """Pre-seed the stores and run both scripted walkthrough sessions."""
    seed_history(stores)
    summaries = []
    for actions, answers in WALKTHROUGH_SESSIONS:
        task, adapter, responder = scripted_session(actions, answers)
        summaries.append(run_session(task, adapter, stores, responder, out=out))
    return summaries


# -- fixture replay -------------------------------------------------------------


@dataclass(frozen=True)
class FixtureOp:
    proposal: ActionProposal
    task_id: str
    required: Mapping[str, bool]
    mechanism: str = ""


@dataclass(frozen=True)
class FixtureTask:
    id: str
    description: str
    ops: tuple[FixtureOp, ...]


def read_fixture(name_or_path: Path | str) -> Any:
    """Load a JSON fixture by path, or by bare file name from the bundled set."""
    path = Path(name_or_path)
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return json.loads(resources.files("hwgov.fixtures").joinpath(str(name_or_path)).read_text(encoding="utf-8"))


def load_fixture(path: Path | str | None = None) -> list[FixtureTask]:
    doc = read_fixture(path if path is not None else TABLE1_FIXTURE)
    tasks = []
    for t in doc["tasks"]:
        ops = tuple(
            FixtureOp(
                proposal=ActionProposal.from_dict(op),
                task_id=t["id"],
                required=dict(op.get("oracle_requires_checkin", {})),
                mechanism=op.get("note", ""),
            )
            for op in t["operations"]
        )
        tasks.append(FixtureTask(t["id"], t["task"], ops))
    return tasks


@dataclass(frozen=True)
class OpRoute:
    proposal_id: int
    task_id: str
    route: Route
    initiator: Initiator
    score: float | None


def replay_fixture_tasks(stores: Stores, tasks: Sequence[FixtureTask] | None = None) -> list[OpRoute]:
    """Run each fixture task as one session with a developer who approves every check-in."""
    tasks = list(tasks) if tasks is not None else load_fixture()
    routes: list[OpRoute] = []
    for task in tasks:
        adapter = ScriptedAgentAdapter([op.proposal for op in task.ops], task=task.description)
        summary = run_session(task.description, adapter, stores, AutoApproveResponder(),
                              session_id=f"replay-{task.id}")
        for d in summary.decisions:
            routes.append(OpRoute(d.proposal_id, task.id, d.route, d.initiator, d.score))
    return routes


def oracle_labels(tasks: Sequence[FixtureTask], persona_name: str | Persona) -> list[bool]:
    key = Persona(persona_name).value
    return [bool(op.required.get(key, False)) for t in tasks for op in t.ops]


@dataclass(frozen=True)
class OracleScore:
    checkins: int
    ratio: float
    recall: float | None
    precision: float | None
    required: int
    caught: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "checkins": self.checkins,
            "ratio": self.ratio,
            "recall": self.recall,
            "precision": self.precision,
            "required": self.required,
            "caught": self.caught,
        }


def score_against_oracle(routes: Sequence[Route], required: Sequence[bool]) -> OracleScore:
    """Recall = required caught / required, precision = required caught / caught.
    Either is ``None`` when its denominator is zero."""
    if len(routes) != len(required):
        raise ValueError(f"{len(routes)} routes but {len(required)} oracle labels")
    flagged = [r is Route.LIVE_CHECK_IN for r in routes]
    checkins = sum(flagged)
    n_required = sum(required)
    caught = sum(f and q for f, q in zip(flagged, required))
    return OracleScore(
        checkins=checkins,
        ratio=checkins / len(routes) if routes else 0.0,
        recall=caught / n_required if n_required else None,
        precision=caught / checkins if checkins else None,
        required=n_required,
        caught=caught,
    )


@dataclass
class Table1Row:
    run: str
    persona: str
    score: OracleScore
    routes: list[OpRoute] = field(default_factory=list)
    preferences: list[str] = field(default_factory=list)


def run_table1(seed: int = 0, tasks: Sequence[FixtureTask] | None = None) -> list[Table1Row]:
    tasks = list(tasks) if tasks is not None else load_fixture()
    rows = []
    for name, run in ((Persona.CAUTIOUS, "H-C"), (Persona.PERMISSIVE, "H-P")):
        stores = Stores.in_memory()
        _, prefs = seed_repo(PERSONAS[name], stores, seed)
        routes = replay_fixture_tasks(stores, tasks)
        result = score_against_oracle([r.route for r in routes], oracle_labels(tasks, name))
        rows.append(Table1Row(run, name.value, result, routes, [p.name.value for p in prefs]))
    return rows


def coefficient_deviation_study(
    seed: int = 0, personas: Sequence[PersonaProfile] | None = None
) -> dict[str, dict[str, float]]:
    """Train a fresh warm-started classifier per persona; report learned minus prior."""
    personas = personas if personas is not None else list(PERSONAS.values())
    base = warm_start()
    table: dict[str, dict[str, float]] = {}
    for profile in personas:
        state = train_on(base, generate_persona_decisions(profile, seed), profile.replay_factor)
        deltas = {
            name: w - w0 for name, w, w0 in zip(FEATURE_NAMES, state.weights, state.warm_start_weights)
        }
        table[profile.name.value] = {f: deltas[f] for f in DEVIATION_FEATURES}
    return table
