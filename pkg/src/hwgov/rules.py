"""Turn one natural-language rule into a hard constraint or a guidance snippet.

The built-in classifier is a small deterministic grammar:

    <modal> ... <verb> ... <target>

``never`` / ``must not`` / ``do not`` forbid; ``always`` / ``ask before`` /
``require approval`` demand a check-in. A target is a quoted path, any token
containing ``/``, or a category keyword. Rules that lack a modal, a verb or a
target become behavioral guidance.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

from .core import ActionKind, ChangeCategory, EventKind
from .governance import Effect, HardConstraint
from .memory import GuidanceStore, TraceStore, tokenize

RULES_FILE = "rules.json"


class EmptyRule(ValueError):
    pass


class Classification(str, Enum):
    HARD_CONSTRAINT = "hard_constraint"
    BEHAVIORAL_GUIDANCE = "behavioral_guidance"


@dataclass(frozen=True)
class BehavioralGuidance:
    id: str
    text: str
    topics: frozenset[str] = field(default_factory=frozenset)
    created_at: int = 0

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("guidance text must be nonempty")
        object.__setattr__(self, "topics", frozenset(t.lower() for t in self.topics))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "topics": sorted(self.topics),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BehavioralGuidance":
        return cls(
            id=str(data["id"]),
            text=str(data["text"]),
            topics=frozenset(data.get("topics", ())),
            created_at=int(data.get("created_at", 0)),
        )


@dataclass(frozen=True)
class RuleInterpretation:
    classification: Classification
    compiled: HardConstraint | BehavioralGuidance
    rendering: str


class ClassifierAdapter(Protocol):
    """Pluggable replacement for the grammar, e.g. an LLM-backed classifier."""

    def classify(self, text: str) -> RuleInterpretation: ...


_FORBID = re.compile(r"\b(never|must not|mustn't|do not|don't|should not|shouldn't)\b")
_REQUIRE = re.compile(
    r"\b(always ask|ask before|ask for (?:my )?approval|require approval|requires approval"
    r"|always check in|check in before|always)\b"
)
_WRITE = frozenset({ActionKind.APPLY, ActionKind.RUN_COMMAND})
_VERBS: dict[str, frozenset[ActionKind]] = {
    "write": _WRITE,
    "delete": _WRITE,
    "remove": _WRITE,
    "edit": frozenset({ActionKind.APPLY}),
    "modify": frozenset({ActionKind.APPLY}),
    "change": frozenset({ActionKind.APPLY}),
    "create": frozenset({ActionKind.APPLY}),
    "touch": frozenset({ActionKind.APPLY}),
    "run": frozenset({ActionKind.RUN_COMMAND}),
    "execute": frozenset({ActionKind.RUN_COMMAND}),
    "read": frozenset({ActionKind.READ}),
}
_VERB_FORMS = {
    form: base
    for base in _VERBS
    for form in {
        base,
        base + "s",
        base.rstrip("e") + "ing",
        base.rstrip("e") + "ed",
        base + "d",
        base + "ing",
    }
}
_VERB_FORMS.update({"modifies": "modify", "modifying": "modify", "modified": "modify",
                    "writes": "write", "writing": "write", "written": "write",
                    "running": "run", "ran": "run", "reading": "read"})
_CATEGORY_WORDS: dict[str, ChangeCategory] = {
    "api": ChangeCategory.API,
    "apis": ChangeCategory.API,
    "endpoint": ChangeCategory.API,
    "endpoints": ChangeCategory.API,
    "schema": ChangeCategory.DATA_MODEL,
    "schemas": ChangeCategory.DATA_MODEL,
    "migration": ChangeCategory.DATA_MODEL,
    "migrations": ChangeCategory.DATA_MODEL,
    "config": ChangeCategory.CONFIG,
    "configuration": ChangeCategory.CONFIG,
    "security": ChangeCategory.SECURITY,
    "auth": ChangeCategory.SECURITY,
    "test": ChangeCategory.TEST,
    "tests": ChangeCategory.TEST,
    "doc": ChangeCategory.DOC,
    "docs": ChangeCategory.DOC,
    "documentation": ChangeCategory.DOC,
}
_QUOTED = re.compile(r"[`'\"]([^`'\"]+)[`'\"]")
_WORD = re.compile(r"[A-Za-z0-9_./*\-]+")


def normalize_target(raw: str) -> str:
    """Repo-relative glob for a path token; bare directories become ``dir/**``."""
    path = raw.strip().strip(".,;:").lstrip("./")
    if path.startswith("/"):
        path = path.lstrip("/")
    if any(ch in path for ch in "*?["):
        return path
    last = path.rstrip("/").rsplit("/", 1)[-1]
    if path.endswith("/") or "." not in last:
        return path.rstrip("/") + "/**"
    return path


def _find_target(text: str, after: int) -> tuple[str, frozenset[ChangeCategory] | None] | None:
    tail = text[after:]
    quoted = _QUOTED.search(tail)
    if quoted:
        return normalize_target(quoted.group(1)), None
    words = _WORD.findall(tail)
    for w in words:
        if "/" in w and w.strip("/"):
            return normalize_target(w), None
    for w in words:
        cat = _CATEGORY_WORDS.get(w.lower().strip(".,;:"))
        if cat is not None:
            return "", frozenset({cat})
    return None


def _guidance(text: str, why: str) -> RuleInterpretation:
    g = BehavioralGuidance(id="", text=text.strip(), topics=frozenset(tokenize(text)))
    return RuleInterpretation(
        Classification.BEHAVIORAL_GUIDANCE,
        g,
        f"behavioral guidance ({why}); retrieved into agent context when relevant: {g.text!r}",
    )


def render_constraint(c: HardConstraint) -> str:
    verb = "forbid" if c.effect is Effect.FORBID else "require a check-in for"
    kinds = ", ".join(sorted(k.value for k in c.action_filter))
    where = f"paths matching {c.path_glob}" if c.path_glob else "any path"
    if c.category_filter:
        where += " in categories " + ", ".join(sorted(x.value for x in c.category_filter))
    return f"hard constraint: {verb} {kinds} on {where}"


def compile_rule(text: str, classifier: ClassifierAdapter | None = None) -> RuleInterpretation:
    if not text or not text.strip():
        raise EmptyRule("rule text is empty")
    if classifier is not None:
        return classifier.classify(text)
    lowered = text.lower()
    forbid = _FORBID.search(lowered)
    require = _REQUIRE.search(lowered)
    if not forbid and not require:
        return _guidance(text, "no hard-modal keyword")
    if forbid and (not require or forbid.start() <= require.start()):
        effect, modal = Effect.FORBID, forbid
    else:
        effect, modal = Effect.REQUIRE_CHECK_IN, require
    verb_end = None
    actions: frozenset[ActionKind] | None = None
    for m in re.finditer(r"[a-z']+", lowered[modal.end():]):
        base = _VERB_FORMS.get(m.group(0))
        if base is not None:
            actions = _VERBS[base]
            verb_end = modal.end() + m.end()
            break
    if actions is None:
        return _guidance(text, "hard-modal keyword but no recognizable action")
    target = _find_target(text, verb_end)
    if target is None:
        return _guidance(text, "hard-modal keyword but no extractable path or category target")
    glob, categories = target
    constraint = HardConstraint(
        id="",
        action_filter=actions,
        effect=effect,
        path_glob=glob,
        category_filter=categories,
        source_text=text.strip(),
    )
    return RuleInterpretation(Classification.HARD_CONSTRAINT, constraint, render_constraint(constraint))


# -- persistence ---------------------------------------------------------------


def conflicts(constraints: list[HardConstraint]) -> list[tuple[str, str]]:
    """Forbid/RequireCheckIn pairs that govern the same target; Forbid wins at runtime."""
    out = []
    for i, a in enumerate(constraints):
        for b in constraints[i + 1:]:
            if a.effect is b.effect or not (a.action_filter & b.action_filter):
                continue
            if a.path_glob == b.path_glob and a.category_filter == b.category_filter:
                out.append((a.id, b.id))
    return out


class RuleStore:
    def __init__(self, path: Path | str | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._records: list[dict[str, Any]] = []
        if self.path is not None and self.path.exists():
            self._records = json.loads(self.path.read_text(encoding="utf-8"))

    def _save(self) -> None:
        if self.path is None:
            return
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self._records, indent=2) + "\n", encoding="utf-8")
        tmp.replace(self.path)

    @property
    def records(self) -> list[dict[str, Any]]:
        return [dict(r) for r in self._records]

    def _next_id(self) -> str:
        nums = [int(r["id"][1:]) for r in self._records if r["id"][1:].isdigit()]
        return f"r{max(nums, default=0) + 1}"

    def add(self, interp: RuleInterpretation) -> str:
        rule_id = self._next_id()
        compiled = replace(interp.compiled, id=rule_id)
        self._records.append(
            {
                "id": rule_id,
                "classification": interp.classification.value,
                "source_text": compiled.source_text
                if isinstance(compiled, HardConstraint)
                else compiled.text,
                "compiled": compiled.to_dict(),
            }
        )
        self._save()
        return rule_id

    def remove(self, rule_id: str) -> bool:
        before = len(self._records)
        self._records = [r for r in self._records if r["id"] != rule_id]
        self._save()
        return len(self._records) != before

    def constraints(self) -> list[HardConstraint]:
        return [
            HardConstraint.from_dict(r["compiled"])
            for r in self._records
            if r["classification"] == Classification.HARD_CONSTRAINT.value
        ]

    def guidance(self) -> list[BehavioralGuidance]:
        return [
            BehavioralGuidance.from_dict(r["compiled"])
            for r in self._records
            if r["classification"] == Classification.BEHAVIORAL_GUIDANCE.value
        ]


def confirm_and_persist(
    interp: RuleInterpretation,
    confirmed: bool,
    rules: RuleStore,
    traces: TraceStore,
    guidance: GuidanceStore | None = None,
    session_id: str = "rules",
) -> str | None:
    """Store a confirmed rule and return its id; ``None`` means discarded."""
    if not confirmed:
        return None
    rule_id = rules.add(interp)
    if interp.classification is Classification.BEHAVIORAL_GUIDANCE and guidance is not None:
        guidance.add(interp.compiled.text, source=f"rule:{rule_id}", topics=interp.compiled.topics)
    traces.record(
        EventKind.RULE_ADDED,
        {"rule_id": rule_id, "classification": interp.classification.value},
        session_id,
    )
    return rule_id
