"""The ten acceptance criteria, each reported as a single PASS/FAIL line."""

from __future__ import annotations

import io
import json
import math
import random
import time

from hwgov.cli import main
from hwgov.core import (
    ActionKind,
    ActionProposal,
    ChangeCategory,
    FeatureVector,
    Initiator,
    Phase,
    PreferenceName,
    Route,
)
from hwgov.evaluation import (
    PERSONAS,
    WALKTHROUGH_SESSIONS,
    Persona,
    coefficient_deviation_study,
    load_fixture,
    replay_fixture_tasks,
    run_table1,
    run_walkthrough,
    scripted_session,
    seed_history,
    seed_repo,
)
from hwgov.governance import Effect, HardConstraint, Thresholds, band_route, evaluate
from hwgov.memory import TraceStore
from hwgov.observe import show_report
from hwgov.policy import PolicyState, load, persist, sgd_update
from hwgov.rules import Classification, compile_rule
from hwgov.session import AutoApproveResponder, ScriptedAgentAdapter, run_session
from hwgov.workspace import Stores, Workspace

from .conftest import ACCEPTANCE_LINES

PROD_RULE = "Never touch config/prod/**"


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def hw(cwd, *argv) -> tuple[int, str]:
    out = io.StringIO()
    code = main(list(argv), stdout=out, stdin=io.StringIO(""), cwd=cwd)
    return code, out.getvalue()


def _log_loss(params: list[float], x: tuple[float, ...], y: int) -> float:
    z = params[-1] + sum(w * v for w, v in zip(params, x))
    return math.log1p(math.exp(-z)) if y else math.log1p(math.exp(z))


def test_1_gradient_correctness():
    rng = random.Random(2024)
    start = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for _ in range(100):
        w = [rng.uniform(-2, 2) for _ in range(13)]
        b = rng.uniform(-1, 1)
        x = tuple(rng.random() for _ in range(13))
        y = rng.randint(0, 1)
        state = PolicyState(weights=tuple(w), bias=b)
        new = sgd_update(state, FeatureVector.from_sequence(x), y)
        before = [*w, b]
        after = [*new.weights, new.bias]
        analytic = [-(a - o) / state.learning_rate for a, o in zip(after, before)]
        numeric = []
        for j in range(14):
            up, down = list(before), list(before)
            up[j] += h
            down[j] -= h
            numeric.append((_log_loss(up, x, y) - _log_loss(down, x, y)) / (2 * h))
        diff = math.dist(analytic, numeric)
        scale = max(math.hypot(*analytic) + math.hypot(*numeric), 1e-12)
        worst = max(worst, diff / scale)
    elapsed = time.perf_counter() - start
    verdict(1, "gradient correctness", worst < 1e-6 and elapsed < 1.0,
            f"max relative error {worst:.2e} over 100 instances in {elapsed:.3f}s")


def test_2_band_routing():
    rng = random.Random(7)
    t = Thresholds()
    history = TraceStore()
    p = ActionProposal(1, ActionKind.APPLY, ("task_api/x.py",), ChangeCategory.GENERAL, 5, 1, 0.5,
                       Phase.IMPLEMENTATION)
    scores = sorted(rng.random() for _ in range(10_000))
    # zero weights make the cascade score exactly sigmoid(bias)
    states = [PolicyState.zeros(bias=math.log(s / (1 - s))) for s in scores]
    mismatches = 0
    routes = []
    start = time.perf_counter()
    for s, state in zip(scores, states):
        out = evaluate(p, [], [], state, t, history)
        expected = (Route.SILENT_APPROVE if out.score > 0.90
                    else Route.FLAGGED_APPROVE if out.score >= 0.20 else Route.LIVE_CHECK_IN)
        mismatches += out.route is not expected or band_route(out.score, t) is not expected
        mismatches += abs(out.score - s) > 1e-9
        routes.append(out.route)
    monotone = all(a.strictness >= b.strictness for a, b in zip(routes, routes[1:]))
    elapsed = time.perf_counter() - start
    verdict(2, "band routing", mismatches == 0 and monotone and elapsed < 1.0,
            f"{mismatches} mismatches, monotone={monotone}, {elapsed:.3f}s")


def test_3_table1_structure():
    start = time.perf_counter()
    hc, hp = run_table1(seed=0)
    elapsed = time.perf_counter() - start
    ok = (
        hc.score.recall == 1.0
        and hc.score.caught == hc.score.required == 4
        and hc.score.checkins <= 7
        and hp.score.required == 0
        and hp.score.recall is None
        and hp.score.checkins <= 4
        and hc.score.checkins > hp.score.checkins
        and elapsed < 10.0
    )
    verdict(3, "cautious vs permissive replay", ok,
            f"H-C {hc.score.checkins} check-ins recall {hc.score.recall:.2f} "
            f"precision {hc.score.precision:.2f}; H-P {hp.score.checkins} check-ins recall "
            f"{'undefined' if hp.score.recall is None else hp.score.recall}; {elapsed:.2f}s")


def test_4_preference_inference():
    expected = {PreferenceName.PREFER_FEWER_CHECKINS, PreferenceName.SKIP_LOW_RISK_PLAN_CHECKPOINT}
    _, permissive = seed_repo(PERSONAS[Persona.PERMISSIVE], Stores.in_memory())
    _, cautious = seed_repo(PERSONAS[Persona.CAUTIOUS], Stores.in_memory())
    got_p = {p.name for p in permissive}
    ok = got_p == expected and not cautious and PERSONAS[Persona.PERMISSIVE].approval_rate >= 0.90
    verdict(4, "preference inference", ok,
            f"permissive (rate {PERSONAS[Persona.PERMISSIVE].approval_rate:.2f}) -> "
            f"{sorted(p.value for p in got_p)}; cautious "
            f"(rate {PERSONAS[Persona.CAUTIOUS].approval_rate:.2f}) -> {len(cautious)} preferences")


def test_5_coefficient_signs():
    table = coefficient_deviation_study(seed=0)
    expected = {
        "change_pattern_risk": "+-+",
        "model_confidence_avg": "+++",
        "is_security_sensitive": "---",
        "prior_denials_norm": "---",
    }
    failures = []
    for feature, signs in expected.items():
        for name, sign in zip(("cautious", "permissive", "mixed"), signs):
            v = table[name][feature]
            if not (v > 0 if sign == "+" else v < 0):
                failures.append(f"{name}.{feature}={v:+.3g}")
    for feature in ("is_security_sensitive", "prior_denials_norm"):
        col = {name: table[name][feature] for name in table}
        if min(col, key=col.get) != "permissive":
            failures.append(f"permissive not most negative on {feature}")
    checks = 12 + 2
    verdict(5, "coefficient signs", not failures,
            f"{checks - len(failures)}/{checks} sign and ordering checks hold"
            + (f"; failing: {', '.join(failures)}" if failures else ""))


def test_6_hard_constraint_precedence():
    rng = random.Random(11)
    blocked = 0
    for i in range(1000):
        top = rng.choice(["config", "task_api", "infra", "docs"])
        path = f"{top}/{rng.choice(['a', 'b', 'c'])}/f{i}.py"
        category = rng.choice(list(ChangeCategory))
        p = ActionProposal(i, ActionKind.APPLY, (path,), category, rng.randint(0, 900), 1,
                           rng.random(), Phase.IMPLEMENTATION)
        state = PolicyState.zeros(bias=rng.uniform(-12, 12))
        c = HardConstraint("f", frozenset({ActionKind.APPLY}), Effect.FORBID, path_glob=f"{top}/**")
        also = HardConstraint("q", frozenset({ActionKind.APPLY}), Effect.REQUIRE_CHECK_IN,
                              path_glob=f"{top}/**")
        out = evaluate(p, [also, c], [], state, Thresholds(), TraceStore(),
                       granted=rng.random() < 0.5)
        blocked += out.route is Route.BLOCKED
    interp = compile_rule(PROD_RULE)
    prod = ActionProposal(1, ActionKind.APPLY, ("config/prod/database.yaml",),
                          ChangeCategory.CONFIG, 4, 1, 0.99, Phase.IMPLEMENTATION)
    rule_out = evaluate(prod, [interp.compiled], [], PolicyState.zeros(bias=12.0), Thresholds(),
                        TraceStore())
    ok = (blocked == 1000 and interp.classification is Classification.HARD_CONSTRAINT
          and rule_out.route is Route.BLOCKED)
    verdict(6, "hard-constraint precedence", ok,
            f"{blocked}/1000 forbidden proposals blocked; '{PROD_RULE}' compiles to "
            f"{interp.classification.value} and routes a matching apply to {rule_out.route.value}")


def test_7_revocation(tmp_path):
    hw(tmp_path, "init")
    assert hw(tmp_path, "eval", "seed", "--persona", "permissive")[0] == 0
    ws = Workspace.discover(tmp_path)
    proposal = {"id": 1, "action_kind": "apply", "paths": ["task_api/api.py"],
                "change_category": "api", "diff_lines": 20, "model_confidence": 0.9,
                "phase": "implementation"}
    p = ActionProposal.from_dict(proposal)
    stores = ws.open()
    before = evaluate(p, stores.constraints, stores.preferences.active, stores.policy,
                      stores.thresholds, stores.traces)
    policy_bytes = (ws.state_dir / "policy.json").read_bytes()
    state_before = load(ws.state_dir)

    code, _ = hw(tmp_path, "observe", "preferences-revoke", "--topic", "api")
    identical = (ws.state_dir / "policy.json").read_bytes() == policy_bytes
    identical = identical and load(ws.state_dir) == state_before

    script = tmp_path / "one_api_edit.json"
    script.write_text(json.dumps({"task": "adjust the handler", "actions": [proposal]}))
    answers = tmp_path / "answers.json"
    answers.write_text(json.dumps({"answers": ["a"]}))
    run_code, _ = hw(tmp_path, "run", "--adapter", f"scripted:{script}", "--respond", str(answers))
    after = ws.open()
    (_, decision), = after.traces.decisions("s1")
    ok = (
        code == 0
        and before.score > 0.90
        and before.route is Route.SILENT_APPROVE
        and identical
        and run_code == 0
        and decision.route is Route.LIVE_CHECK_IN
        and decision.initiator is Initiator.POLICY_INITIATED
        and decision.score > 0.90
    )
    verdict(7, "revocation semantics", ok,
            f"api proposal scoring {before.score:.3f} went {before.route.value} -> "
            f"{decision.route.value}; policy bit-identical across revoke: {identical}")


def test_8_walkthrough_replay():
    stores = Stores.in_memory(verification_command="true")
    s1, s2 = run_walkthrough(stores)
    reads = [d for e, d in stores.traces.decisions(s2.session_id)
             if e.payload["action_kind"] == ActionKind.READ.value]
    r = show_report(stores.traces)
    ok = (
        s1.checkin_line == "Check-ins: 3 policy-initiated, 1 agent-initiated"
        and s1.verification_results == [True]
        and s2.checkin_line == "Check-ins: 3 policy-initiated, 0 agent-initiated"
        and reads and all(d.initiator is Initiator.SILENT_AUTO for d in reads)
        and (r.agent_initiated, r.agent_approval_rate) == (1, 1.0)
        and (r.policy_checkins, r.deliberate_approvals) == (10, 7)
        and (r.verification_passed, r.verification_total) == (4, 4)
    )
    verdict(8, "walkthrough replay", ok,
            f"s1 '{s1.checkin_line}', s2 '{s2.checkin_line}', report agent {r.agent_initiated} "
            f"({r.agent_approval_rate:.0%}), policy {r.policy_checkins}, deliberate "
            f"{r.deliberate_approvals}, verification {r.verification_passed}/{r.verification_total}")


_FORBIDDEN_KEYS = {"score", "scores", "weight", "weights", "bias", "features", "policy",
                   "learning_rate", "probability"}


def _walk(value, path="$"):
    if isinstance(value, dict):
        for k, v in value.items():
            yield f"{path}.{k}", k, v
            yield from _walk(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            yield f"{path}[{i}]", None, v
            yield from _walk(v, f"{path}[{i}]")


def test_9_opacity():
    contexts = []
    stores = Stores.in_memory(verification_command="true")
    seed_history(stores)
    for actions, answers in WALKTHROUGH_SESSIONS:
        task, adapter, responder = scripted_session(actions, answers)
        run_session(task, adapter, stores, responder)
        contexts.extend(adapter.contexts)
    replay = Stores.in_memory()
    for task in load_fixture():
        adapter = ScriptedAgentAdapter([op.proposal for op in task.ops], task=task.description)
        run_session(task.description, adapter, replay, AutoApproveResponder())
        contexts.extend(adapter.contexts)
    leaks = []
    for ctx in contexts:
        doc = json.loads(json.dumps(ctx.to_dict()))
        for where, key, value in _walk(doc):
            if key in _FORBIDDEN_KEYS or isinstance(value, float):
                leaks.append(where)
    verdict(9, "opacity", bool(contexts) and not leaks,
            f"{len(contexts)} serialized prompt contexts, {len(leaks)} numeric policy fields")


def test_10_determinism_and_persistence(tmp_path):
    def replayed() -> PolicyState:
        stores = Stores.in_memory()
        seed_repo(PERSONAS[Persona.CAUTIOUS], stores, seed=0)
        replay_fixture_tasks(stores)
        return stores.policy

    def walked() -> PolicyState:
        stores = Stores.in_memory(verification_command="true")
        run_walkthrough(stores)
        return stores.policy

    same_replay = replayed() == replayed()
    same_walk = walked() == walked()

    state = walked()
    persist(state, tmp_path / "p")
    round_trip = load(tmp_path / "p") == state

    ws = Workspace.discover(tmp_path / "repo")
    ws.init()
    live = ws.open()
    live.config["verification_command"] = "true"
    run_walkthrough(live)
    from_disk = show_report(TraceStore(ws.state_dir / "traces.jsonl")) == show_report(live.traces)
    verdict(10, "determinism and persistence",
            same_replay and same_walk and round_trip and from_disk,
            f"replay identical={same_replay}, walkthrough identical={same_walk}, "
            f"persist/load exact={round_trip}, report from traces.jsonl matches={from_disk}")
