from __future__ import annotations

from pathlib import Path

import pytest

from hwgov.core import ActionKind, ActionProposal, ChangeCategory, Phase
from hwgov.workspace import Workspace


@pytest.fixture(autouse=True)
def _no_state_override(monkeypatch):
    # a developer's HW_HOME must never leak into the suite
    monkeypatch.delenv("HW_HOME", raising=False)


@pytest.fixture
def workspace(tmp_path: Path) -> Workspace:
    ws = Workspace.discover(tmp_path)
    ws.init()
    return ws


def apply_op(
    paths: tuple[str, ...] = ("task_api/api.py",),
    category: ChangeCategory = ChangeCategory.API,
    diff: int = 20,
    conf: float = 0.8,
    pid: int = 1,
    phase: Phase = Phase.IMPLEMENTATION,
) -> ActionProposal:
    return ActionProposal(
        id=pid,
        action_kind=ActionKind.APPLY,
        paths=paths,
        change_category=category,
        diff_lines=diff,
        files_touched=len(set(paths)),
        model_confidence=conf,
        phase=phase,
    )


class FakeHistory:
    def __init__(self, counts=(0, 0), touched=(), runs=()):
        self.counts = counts
        self.touched = set(touched)
        self.runs = list(runs)

    def counts_for(self, key):
        return self.counts

    def has_touched(self, path, kind):
        return (kind, path) in self.touched

    def recent_verifications(self, n):
        return self.runs[-n:]


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
