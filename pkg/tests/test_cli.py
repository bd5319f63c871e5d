from __future__ import annotations

import io
import json

import pytest

from hwgov.cli import build_parser, main


def hw(tmp_path, *argv, stdin: str = ""):
    out = io.StringIO()
    code = main(list(argv), stdout=out, stdin=io.StringIO(stdin), cwd=tmp_path)
    return code, out.getvalue()


def write_session(tmp_path, actions, answers, name="s"):
    (tmp_path / f"{name}.json").write_text(json.dumps({"task": "tidy up", "actions": actions}))
    (tmp_path / f"{name}_answers.json").write_text(json.dumps({"answers": answers}))
    return str(tmp_path / f"{name}.json"), str(tmp_path / f"{name}_answers.json")


APPLY = {"id": 1, "action_kind": "apply", "paths": ["task_api/api.py"], "change_category": "api",
         "diff_lines": 10, "model_confidence": 0.8, "phase": "implementation"}


@pytest.fixture
def repo(tmp_path):
    assert hw(tmp_path, "init")[0] == 0
    return tmp_path


def _subcommands(parser, prefix=()):
    for action in parser._actions:
        if action.__class__.__name__ == "_SubParsersAction":
            for name, sub in action.choices.items():
                yield prefix + (name,)
                yield from _subcommands(sub, prefix + (name,))


class TestUsage:
    @pytest.mark.parametrize("argv", [()] + [c for c in _subcommands(build_parser())])
    def test_every_command_has_help(self, tmp_path, argv, capsys):
        assert hw(tmp_path, *argv, "--help")[0] == 0
        assert "usage: hw" in capsys.readouterr().out

    def test_unknown_command(self, tmp_path):
        assert hw(tmp_path, "frobnicate")[0] == 64

    def test_no_command(self, tmp_path):
        assert hw(tmp_path)[0] == 64

    def test_needs_init(self, tmp_path, capsys):
        assert hw(tmp_path, "observe", "report")[0] == 78
        assert "hw init" in capsys.readouterr().err

    def test_eval_table1_without_init(self, tmp_path):
        code, out = hw(tmp_path, "eval", "table1", "--format", "machine")
        assert code == 0
        rows = json.loads(out)["rows"]
        assert [r["run"] for r in rows] == ["H-C", "H-P"]
        assert rows[0]["recall"] == 1.0 and rows[1]["recall"] is None


class TestInitAndConfig:
    def test_init_twice(self, repo):
        code, out = hw(repo, "init")
        assert code == 0 and "already initialized" in out

    def test_set_and_get(self, repo):
        assert hw(repo, "config", "verification_command", "true")[0] == 0
        assert hw(repo, "config", "verification_command")[1].strip() == '"true"'
        assert hw(repo, "config", "flag_threshold", "0.25")[0] == 0
        code, out = hw(repo, "config", "--format", "machine")
        doc = json.loads(out)
        assert doc["schema"] == 1 and doc["config"]["flag_threshold"] == 0.25

    @pytest.mark.parametrize(
        "argv",
        [("config", "flag_threshold", "0.95"), ("config", "repo_id", "x"), ("config", "nope"),
         ("config", "mode", "reckless")],
    )
    def test_rejected(self, repo, argv):
        assert hw(repo, *argv)[0] == 64


class TestRules:
    def test_add_confirm_list_remove(self, repo):
        code, out = hw(repo, "rules", "add", "Never modify config/prod/", stdin="y\n")
        assert code == 0 and "forbid apply on paths matching config/prod/**" in out
        assert "stored as r1" in out
        listing = json.loads(hw(repo, "rules", "list", "--format", "machine")[1])
        assert listing["rules"][0]["classification"] == "hard_constraint"
        assert hw(repo, "rules", "remove", "r1")[0] == 0
        assert hw(repo, "rules", "remove", "r1")[0] == 64

    def test_declined(self, repo):
        code, out = hw(repo, "rules", "add", "Prefer short functions", stdin="n\n")
        assert code == 0 and "discarded" in out
        assert "(no rules)" in hw(repo, "rules", "list")[1]

    def test_empty_rule(self, repo):
        assert hw(repo, "rules", "add", "  ", "--yes")[0] == 64


class TestRun:
    def test_blocked_session_exits_2(self, repo):
        hw(repo, "rules", "add", "Never modify task_api/", "--yes")
        actions, answers = write_session(repo, [APPLY], [])
        code, out = hw(repo, "run", "--adapter", f"scripted:{actions}", "--respond", answers)
        assert code == 2 and "blocked:" in out

    def test_failed_verification_exits_3(self, repo):
        hw(repo, "config", "verification_command", "false")
        actions, answers = write_session(repo, [APPLY], ["a"])
        code, _ = hw(repo, "run", "--adapter", f"scripted:{actions}", "--respond", answers)
        assert code == 3

    def test_dry_responder_exits_4(self, repo):
        actions, answers = write_session(
            repo, [{"type": "check_in", "reason": "uncertainty", "question": "which one?"}], [])
        code, out = hw(repo, "run", "--adapter", f"scripted:{actions}", "--respond", answers)
        assert code == 4 and "INCOMPLETE" in out

    def test_missing_verification_binary_exits_78(self, repo):
        hw(repo, "config", "verification_command", "no-such-binary-here")
        actions, answers = write_session(repo, [APPLY], ["a", "a"])
        assert hw(repo, "run", "--adapter", f"scripted:{actions}", "--respond", answers)[0] == 78

    def test_missing_fixture_exits_78(self, repo):
        assert hw(repo, "run", "--adapter", "scripted:nope.json")[0] == 78

    def test_remote_needs_endpoint(self, repo, monkeypatch):
        monkeypatch.delenv("HW_REMOTE_ENDPOINT", raising=False)
        assert hw(repo, "run", "do things")[0] == 64

    def test_machine_format_keeps_stdout_json(self, repo, capsys):
        actions, answers = write_session(repo, [APPLY], ["a", "a"])
        code, out = hw(repo, "run", "--adapter", f"scripted:{actions}", "--respond", answers,
                       "--format", "machine")
        doc = json.loads(out)
        assert doc["schema"] == 1 and "policy_initiated_checkins" in doc
        assert "summary" in capsys.readouterr().err


class TestWalkthroughViaCli:
    def test_end_to_end(self, repo):
        assert hw(repo, "config", "verification_command", "true")[0] == 0
        assert "recorded 14" in hw(repo, "eval", "preseed")[1]
        code, out = hw(repo, "run", "--adapter", "scripted:walkthrough_session1.json",
                       "--respond", "walkthrough_session1_answers.json")
        assert code == 0
        assert "Check-ins: 3 policy-initiated, 1 agent-initiated" in out
        code, out = hw(repo, "run", "--adapter", "scripted:walkthrough_session2.json",
                       "--respond", "walkthrough_session2_answers.json")
        assert code == 0
        assert "Check-ins: 3 policy-initiated, 0 agent-initiated" in out
        assert "reused prior read access" in out
        report = json.loads(hw(repo, "observe", "report", "--format", "machine")[1])
        assert (report["agent_initiated"], report["agent_approval_rate"]) == (1, 1.0)
        assert (report["policy_checkins"], report["deliberate_approvals"]) == (10, 7)
        assert (report["verification_passed"], report["verification_total"]) == (4, 4)
        weights = json.loads(hw(repo, "observe", "weights", "--format", "machine")[1])
        assert weights["schema"] == 1 and len(weights["rows"]) == 13


class TestObserveAndEval:
    def test_revoke(self, repo):
        code, out = hw(repo, "observe", "preferences-revoke", "--topic", "api")
        assert code == 0 and "accumulated states preserved" in out
        assert "api: revoked" in hw(repo, "observe", "preferences")[1]
        assert hw(repo, "observe", "preferences-revoke", "--topic", "weather")[0] == 64

    def test_seed_permissive(self, repo):
        code, out = hw(repo, "eval", "seed", "--persona", "permissive")
        assert code == 0
        assert "prefer_fewer_checkins, skip_low_risk_plan_checkpoint" in out
        prefs = json.loads(hw(repo, "observe", "preferences", "--format", "machine")[1])
        assert len(prefs["active"]) == 2

    def test_replay(self, repo):
        code, out = hw(repo, "eval", "replay", "--format", "machine")
        assert code == 0 and len(json.loads(out)["routes"]) == 11

    def test_personas(self, tmp_path):
        code, out = hw(tmp_path, "eval", "personas", "--format", "machine")
        assert set(json.loads(out)["deltas"]) == {"cautious", "permissive", "mixed"}
