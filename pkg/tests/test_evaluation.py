from __future__ import annotations

import json

import pytest

from hwgov.core import ActionKind, ChangeCategory, Initiator, PreferenceName, Route
from hwgov.evaluation import (
    DEVIATION_FEATURES,
    PERSONAS,
    Persona,
    Scenario,
    cautious_rule,
    coefficient_deviation_study,
    generate_persona_decisions,
    infer_preferences,
    load_fixture,
    mixed_rule,
    oracle_labels,
    permissive_rule,
    persona,
    read_fixture,
    replay_fixture_tasks,
    run_table1,
    run_walkthrough,
    score_against_oracle,
    seed_history,
    seed_repo,
)
from hwgov.policy import SimilarityKey, warm_start, weight_deltas
from hwgov.workspace import Stores

L, F = Route.LIVE_CHECK_IN, Route.FLAGGED_APPROVE


def scenario(category: str, diff: int = 20, files: int = 1, conf: float = 0.8, **kw) -> Scenario:
    paths = tuple(f"pkg/f{i}.py" for i in range(files))
    return Scenario(ChangeCategory(category), paths, diff, conf, **kw)


class TestPersonas:
    def test_each_has_twenty_decisions(self):
        for profile in PERSONAS.values():
            assert len(profile.scenarios) == 20

    def test_approval_rates(self):
        assert persona("permissive").approval_rate >= 0.90
        assert persona("cautious").approval_rate < 0.90
        assert persona("mixed").approval_rate < 0.90

    def test_rules_on_hand_picked_cases(self):
        auth = scenario("security")
        tiny_doc = scenario("doc", diff=3)
        sprawl = scenario("general", diff=1400, files=10, conf=0.45)
        into_auth = Scenario(ChangeCategory.GENERAL, sprawl.paths[:-1] + ("pkg/auth.py",), 1400, 0.45)
        assert not cautious_rule(auth) and not mixed_rule(auth) and permissive_rule(auth)
        assert cautious_rule(tiny_doc) and permissive_rule(tiny_doc) and mixed_rule(tiny_doc)
        assert permissive_rule(sprawl) and not mixed_rule(sprawl)
        assert not permissive_rule(into_auth)

    def test_generation_is_seeded(self):
        profile = persona(Persona.MIXED)
        a = generate_persona_decisions(profile, seed=3)
        b = generate_persona_decisions(profile, seed=3)
        c = generate_persona_decisions(profile, seed=4)
        assert [(d.features, d.label) for d in a] == [(d.features, d.label) for d in b]
        assert sorted(d.label for d in a) == sorted(d.label for d in c)

    def test_labels_follow_rule(self):
        profile = persona(Persona.CAUTIOUS)
        approvals = sum(d.label for d in generate_persona_decisions(profile))
        assert approvals == round(profile.approval_rate * 20)


class TestPreferenceInference:
    @pytest.mark.parametrize("rate, fires", [(0.95, True), (0.90, True), (0.8999, False), (0.55, False)])
    def test_threshold_is_inclusive(self, rate, fires):
        names = {p.name for p in infer_preferences(rate)}
        expected = {PreferenceName.PREFER_FEWER_CHECKINS, PreferenceName.SKIP_LOW_RISK_PLAN_CHECKPOINT}
        assert names == (expected if fires else set())

    def test_seed_repo_writes_traces_and_prefs(self):
        stores = Stores.in_memory()
        state, prefs = seed_repo(persona("permissive"), stores)
        assert len(stores.traces.decisions()) == 60
        assert state.update_count == 60
        assert stores.policy is state
        assert {p.name for p in stores.preferences.active} == {p.name for p in prefs}
        assert stores.traces.counts_for(SimilarityKey(ChangeCategory.API, "task_api"))[0] > 0


class TestOracleScoring:
    def test_hand_computed(self):
        # 3 check-ins, 2 of them on required ops, 1 required op missed
        routes = [L, L, L, F, F]
        required = [True, True, False, True, False]
        s = score_against_oracle(routes, required)
        assert (s.checkins, s.caught, s.required) == (3, 2, 3)
        assert s.recall == pytest.approx(2 / 3)
        assert s.precision == pytest.approx(2 / 3)
        assert s.ratio == pytest.approx(0.6)

    def test_undefined_denominators(self):
        s = score_against_oracle([F, F], [False, False])
        assert s.recall is None and s.precision is None

    def test_identity(self):
        s = score_against_oracle([L, F, L, L], [True, True, False, True])
        assert s.recall * s.required == pytest.approx(s.precision * s.checkins)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score_against_oracle([L], [True, False])


class TestFixtures:
    def test_table1_fixture_shape(self):
        tasks = load_fixture()
        assert len(tasks) == 2
        assert sum(len(t.ops) for t in tasks) == 11
        assert sum(oracle_labels(tasks, "cautious")) == 4
        assert sum(oracle_labels(tasks, "permissive")) == 0

    def test_read_fixture_by_path(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"k": 1}))
        assert read_fixture(path) == {"k": 1}
        assert "tasks" in read_fixture("table1_tasks.json")

    def test_fresh_replay_is_deterministic(self):
        a = replay_fixture_tasks(Stores.in_memory())
        b = replay_fixture_tasks(Stores.in_memory())
        assert a == b
        assert len(a) == 11


class TestTable1:
    def test_rows(self):
        hc, hp = run_table1()
        assert hc.score.recall == 1.0
        assert hc.score.checkins <= 7
        assert hp.score.recall is None
        assert hp.score.checkins <= 4
        assert hc.score.checkins > hp.score.checkins
        assert hp.preferences and not hc.preferences


class TestCoefficientStudy:
    def test_signs(self):
        table = coefficient_deviation_study()
        expected = {
            "change_pattern_risk": ("+", "-", "+"),
            "model_confidence_avg": ("+", "+", "+"),
            "is_security_sensitive": ("-", "-", "-"),
            "prior_denials_norm": ("-", "-", "-"),
        }
        assert set(DEVIATION_FEATURES) == set(expected)
        for feature, signs in expected.items():
            for name, sign in zip(("cautious", "permissive", "mixed"), signs):
                value = table[name][feature]
                assert (value > 0) if sign == "+" else (value < 0), (name, feature, value)

    def test_untrained_persona_list_is_empty(self):
        assert coefficient_deviation_study(personas=[]) == {}


class TestWalkthrough:
    def test_preseed(self):
        stores = Stores.in_memory()
        assert seed_history(stores) == 14
        key = SimilarityKey(ChangeCategory.API, "task_api")
        assert stores.traces.counts_for(key) == (0, 3)
        assert stores.traces.recent_verifications(5) == [True, True]
        live = [d for _, d in stores.traces.decisions() if d.route is Route.LIVE_CHECK_IN]
        assert stores.policy.update_count == len(live) == 4

    def test_sessions(self):
        stores = Stores.in_memory(verification_command="true")
        s1, s2 = run_walkthrough(stores)
        assert s1.checkin_line == "Check-ins: 3 policy-initiated, 1 agent-initiated"
        assert s2.checkin_line == "Check-ins: 3 policy-initiated, 0 agent-initiated"
        assert s1.verification_results == [True] == s2.verification_results
        reads = [
            (e, d) for e, d in stores.traces.decisions(s2.session_id)
            if e.payload["action_kind"] == ActionKind.READ.value
        ]
        assert [d.initiator for _, d in reads] == [Initiator.SILENT_AUTO]

    def test_weights_move_toward_walkthrough(self):
        stores = Stores.in_memory(verification_command="true")
        run_walkthrough(stores)
        deltas = dict(weight_deltas(stores.policy))
        top3 = [n for n, _ in weight_deltas(stores.policy)[:3]]
        for name in ("change_pattern_risk", "model_confidence_avg"):
            assert deltas[name] > 0
            assert name in top3
        assert warm_start().weights == stores.policy.warm_start_weights
