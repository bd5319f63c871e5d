from __future__ import annotations

import pytest

from hwgov.policy import load, sgd_update, warm_start
from hwgov.core import FeatureVector
from hwgov.workspace import NotInitialized, Workspace, repo_id_for, state_dir_for


class TestWorkspace:
    def test_init_creates_state(self, tmp_path):
        ws = Workspace.discover(tmp_path)
        assert ws.init()
        names = {p.name for p in ws.state_dir.iterdir()}
        assert {"config.json", "policy.json", "traces.jsonl", "guidance.jsonl", "rules.json",
                "preferences.json"} <= names
        assert ws.state_dir == tmp_path / ".hedwig"
        assert ws.repo_id == repo_id_for(tmp_path)

    def test_init_is_idempotent(self, workspace):
        stores = workspace.open()
        stores.policy = sgd_update(stores.policy, FeatureVector(diff_size_norm=0.5), 0)
        stores.save_policy()
        assert not workspace.init()
        assert load(workspace.state_dir) == stores.policy

    def test_require(self, tmp_path):
        with pytest.raises(NotInitialized):
            Workspace.discover(tmp_path).open()

    def test_hw_home_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HW_HOME", str(tmp_path / "elsewhere"))
        assert state_dir_for(tmp_path) == tmp_path / "elsewhere"

    def test_config_validation(self, workspace):
        config = workspace.read_config()
        with pytest.raises(ValueError):
            workspace.write_config({**config, "flag_threshold": 0.95})
        with pytest.raises(ValueError):
            workspace.write_config({**config, "verification_command": True})
        with pytest.raises(ValueError):
            workspace.write_config({**config, "mode": "reckless"})
        assert workspace.read_config() == config

    def test_open_loads_policy(self, workspace):
        stores = workspace.open()
        assert stores.policy.weights == warm_start().weights
        assert stores.policy.repo_id == workspace.repo_id

    def test_lock_is_exclusive(self, workspace):
        with workspace.lock():
            with pytest.raises(RuntimeError, match="holds"):
                with workspace.lock():
                    pass
        with workspace.lock():
            pass
