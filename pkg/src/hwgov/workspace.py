"""Locating and bootstrapping the per-repository ``.hedwig/`` state directory."""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

from . import policy
from .governance import HardConstraint, Thresholds
from .memory import (
    GUIDANCE_FILE,
    PREFERENCES_FILE,
    TRACES_FILE,
    GuidanceStore,
    PreferenceStore,
    TraceStore,
)
from .rules import RULES_FILE, RuleStore

STATE_DIR_NAME = ".hedwig"
CONFIG_FILE = "config.json"
LOCK_FILE = "lock"

DEFAULT_CONFIG: dict[str, Any] = {
    "verification_command": None,
    "require_verification": False,
    "mode": "balanced",
    "proceed_threshold": 0.90,
    "flag_threshold": 0.20,
    "prefer_fewer_checkins_shift": 0.05,
    "retrieval_k": 3,
    "learning_rate": policy.DEFAULT_LEARNING_RATE,
}


class NotInitialized(RuntimeError):
    pass


def repo_id_for(root: Path) -> str:
    return hashlib.sha256(str(root.resolve()).encode()).hexdigest()[:16]


def state_dir_for(cwd: Path | None = None) -> Path:
    override = os.environ.get("HW_HOME")
    if override:
        return Path(override)
    return (cwd or Path.cwd()) / STATE_DIR_NAME


@dataclass
class Stores:
    """Everything a session reads and writes, already loaded."""

    traces: TraceStore
    guidance: GuidanceStore
    preferences: PreferenceStore
    rules: RuleStore
    policy: policy.PolicyState
    config: dict[str, Any] = field(default_factory=lambda: dict(DEFAULT_CONFIG))
    state_dir: Path | None = None
    repo_root: Path | None = None

    @property
    def constraints(self) -> list[HardConstraint]:
        return self.rules.constraints()

    @property
    def thresholds(self) -> Thresholds:
        return Thresholds.from_config(self.config)

    def save_policy(self) -> None:
        if self.state_dir is not None:
            policy.persist(self.policy, self.state_dir)

    @classmethod
    def in_memory(cls, state: policy.PolicyState | None = None, **config: Any) -> "Stores":
        cfg = dict(DEFAULT_CONFIG)
        cfg.update(config)
        return cls(
            traces=TraceStore(),
            guidance=GuidanceStore(),
            preferences=PreferenceStore(),
            rules=RuleStore(),
            policy=state if state is not None else policy.warm_start(),
            config=cfg,
        )


class Workspace:
    def __init__(self, state_dir: Path, repo_root: Path | None = None) -> None:
        self.state_dir = Path(state_dir)
        self.repo_root = repo_root or self.state_dir.parent

    @classmethod
    def discover(cls, cwd: Path | None = None) -> "Workspace":
        cwd = cwd or Path.cwd()
        return cls(state_dir_for(cwd), repo_root=cwd)

    @property
    def initialized(self) -> bool:
        return (self.state_dir / CONFIG_FILE).exists()

    def require(self) -> None:
        if not self.initialized:
            raise NotInitialized(
                f"{self.state_dir} is not initialized; run `hw init` first"
            )

    def init(self) -> bool:
        """Create the state directory. Returns False when it already existed."""
        if self.initialized:
            return False
        self.state_dir.mkdir(parents=True, exist_ok=True)
        config = dict(DEFAULT_CONFIG)
        config["repo_id"] = repo_id_for(self.repo_root)
        self.write_config(config)
        state = policy.warm_start(learning_rate=config["learning_rate"], repo_id=config["repo_id"])
        if not (self.state_dir / policy.POLICY_FILE).exists():
            policy.persist(state, self.state_dir)
        for name in (TRACES_FILE, GUIDANCE_FILE):
            (self.state_dir / name).touch()
        if not (self.state_dir / RULES_FILE).exists():
            (self.state_dir / RULES_FILE).write_text("[]\n", encoding="utf-8")
        if not (self.state_dir / PREFERENCES_FILE).exists():
            PreferenceStore(self.state_dir / PREFERENCES_FILE)._save()
        return True

    def read_config(self) -> dict[str, Any]:
        self.require()
        config = dict(DEFAULT_CONFIG)
        config.update(json.loads((self.state_dir / CONFIG_FILE).read_text(encoding="utf-8")))
        return config

    def write_config(self, config: dict[str, Any]) -> None:
        Thresholds.from_config(config)  # reject invalid bands before writing
        command = config.get("verification_command")
        if command is not None and not isinstance(command, str):
            raise ValueError("verification_command must be a shell command string or null")
        path = self.state_dir / CONFIG_FILE
        path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @property
    def repo_id(self) -> str:
        return str(self.read_config()["repo_id"])

    def open(self) -> Stores:
        config = self.read_config()
        repo_id = str(config["repo_id"])
        try:
            state = policy.load(self.state_dir, repo_id)
        except policy.StateNotFound:
            state = policy.warm_start(learning_rate=config["learning_rate"], repo_id=repo_id)
        return Stores(
            traces=TraceStore(self.state_dir / TRACES_FILE, repo_id=repo_id),
            guidance=GuidanceStore(self.state_dir / GUIDANCE_FILE),
            preferences=PreferenceStore(self.state_dir / PREFERENCES_FILE),
            rules=RuleStore(self.state_dir / RULES_FILE),
            policy=state,
            config=config,
            state_dir=self.state_dir,
            repo_root=self.repo_root,
        )

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        """Advisory single-writer lock; readers never take it."""
        self.require()
        with open(self.state_dir / LOCK_FILE, "a+") as fh:
            try:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise RuntimeError(
                    f"another hw command holds {self.state_dir / LOCK_FILE}"
                ) from None
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
