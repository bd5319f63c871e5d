"""Learned check-in policy: features, logistic scoring, online SGD, warm-start.

Scores are read as the probability that an action is safe to proceed without
asking (1 = proceed, 0 = check in). Approve decisions train toward 1.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import (
    FEATURE_NAMES,
    PHASE_PERMISSIONS,
    ActionKind,
    ActionProposal,
    ChangeCategory,
    FeatureVector,
)

N_FEATURES = len(FEATURE_NAMES)
STATE_VERSION = 1
DEFAULT_LEARNING_RATE = 0.05
DEFAULT_SEED = 0x4845

CATEGORY_RISK: dict[ChangeCategory, float] = {
    ChangeCategory.SECURITY: 1.0,
    ChangeCategory.API: 0.9,
    ChangeCategory.DATA_MODEL: 0.85,
    ChangeCategory.CONFIG: 0.7,
    ChangeCategory.GENERAL: 0.2,
    ChangeCategory.TEST: 0.1,
    ChangeCategory.DOC: 0.05,
}

ACTION_RISK: dict[ActionKind, float] = {
    ActionKind.READ: 0.1,
    ActionKind.PLAN: 0.3,
    ActionKind.CHECK_IN: 0.0,
    ActionKind.RUN_COMMAND: 0.7,
    ActionKind.APPLY: 0.8,
}

SECURITY_PATH_MARKERS = (
    "auth",
    "security",
    "secret",
    "credential",
    "password",
    "crypto",
    "token",
    "permission",
    ".env",
    ".pem",
    ".key",
)

DIFF_SCALE_LINES = 500
BLAST_SCALE_FILES = 10
COUNT_SCALE = 10
VERIFICATION_WINDOW = 20


class StateNotFound(LookupError):
    pass


class CorruptState(ValueError):
    pass


class EmptyPriors(ValueError):
    pass


# -- similarity keys ---------------------------------------------------------


@dataclass(frozen=True, order=True)
class SimilarityKey:
    category: ChangeCategory
    area: str

    def to_dict(self) -> dict[str, str]:
        return {"category": self.category.value, "area": self.area}


def top_level_dir(path: str) -> str:
    head, sep, _ = path.strip("/").partition("/")
    return head if sep else "."


def similarity_key(p: ActionProposal) -> SimilarityKey:
    """Category plus the most frequent top-level directory among the paths."""
    if not p.paths:
        return SimilarityKey(p.change_category, "")
    tops = [top_level_dir(path) for path in p.paths]
    # max over first-seen order keeps ties deterministic
    dominant = max(dict.fromkeys(tops), key=tops.count)
    return SimilarityKey(p.change_category, dominant)


def is_security_path(path: str) -> bool:
    lowered = path.lower()
    return any(marker in lowered for marker in SECURITY_PATH_MARKERS)


# -- feature extraction ------------------------------------------------------


class TraceStoreView(Protocol):
    def counts_for(self, key: SimilarityKey) -> tuple[int, int]: ...

    def has_touched(self, path: str, kind: ActionKind) -> bool: ...

    def recent_verifications(self, n: int) -> list[bool]: ...


@dataclass(frozen=True)
class SessionStats:
    approvals: int = 0
    decisions: int = 0

    @property
    def approval_rate(self) -> float:
        return self.approvals / self.decisions if self.decisions else 0.5


def count_norm(count: int) -> float:
    return min(1.0, math.log1p(count) / math.log1p(COUNT_SCALE))


def diff_norm(diff_lines: int) -> float:
    return min(1.0, math.log1p(diff_lines) / math.log1p(DIFF_SCALE_LINES))


def encode(
    p: ActionProposal,
    *,
    approvals: int = 0,
    denials: int = 0,
    first_touch: bool = True,
    failure_rate: float = 0.0,
    session_rate: float = 0.5,
) -> FeatureVector:
    """Standardize a proposal plus its history counts into the 13 features."""
    f4 = count_norm(approvals)
    f5 = count_norm(denials)
    security = p.change_category is ChangeCategory.SECURITY or any(
        is_security_path(path) for path in p.paths
    )
    return FeatureVector(
        diff_size_norm=diff_norm(p.diff_lines),
        blast_radius_norm=min(1.0, p.files_touched / BLAST_SCALE_FILES),
        change_pattern_risk=CATEGORY_RISK[p.change_category],
        prior_approvals_norm=f4,
        prior_denials_norm=f5,
        is_security_sensitive=1.0 if security else 0.0,
        verification_failure_rate=failure_rate,
        model_confidence_avg=float(p.model_confidence),
        is_first_touch=1.0 if first_touch else 0.0,
        action_type_risk=ACTION_RISK[p.action_kind],
        phase_alignment=1.0 if p.action_kind in PHASE_PERMISSIONS[p.phase] else 0.0,
        session_approval_rate=session_rate,
        path_trust=f4 * (1.0 - f5),
    )


def extract_features(
    p: ActionProposal, history: TraceStoreView, session: SessionStats | None = None
) -> FeatureVector:
    session = session or SessionStats()
    approvals, denials = history.counts_for(similarity_key(p))
    runs = history.recent_verifications(VERIFICATION_WINDOW)
    failures = sum(1 for passed in runs if not passed)
    first_touch = any(not history.has_touched(path, p.action_kind) for path in p.unique_paths)
    return encode(
        p,
        approvals=approvals,
        denials=denials,
        first_touch=first_touch,
        failure_rate=failures / max(1, len(runs)),
        session_rate=session.approval_rate,
    )


# -- the classifier ----------------------------------------------------------


@dataclass(frozen=True)
class PolicyState:
    weights: tuple[float, ...]
    bias: float = 0.0
    learning_rate: float = DEFAULT_LEARNING_RATE
    update_count: int = 0
    warm_start_weights: tuple[float, ...] = field(default=(0.0,) * N_FEATURES)
    warm_start_bias: float = 0.0
    repo_id: str = ""
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        for name in ("weights", "warm_start_weights"):
            vec = tuple(float(v) for v in getattr(self, name))
            if len(vec) != N_FEATURES:
                raise ValueError(f"{name} must have {N_FEATURES} entries")
            if not all(math.isfinite(v) for v in vec):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, vec)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def zeros(cls, **kwargs) -> "PolicyState":
        return cls(weights=(0.0,) * N_FEATURES, **kwargs)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _logit(state: PolicyState, x: Sequence[float]) -> float:
    z = state.bias
    for w, v in zip(state.weights, x):
        z += w * v
    return z


def score(state: PolicyState, x: FeatureVector) -> float:
    return sigmoid(_logit(state, x.as_tuple()))


def sgd_update(state: PolicyState, x: FeatureVector, label: int) -> PolicyState:
    """One log-loss gradient step; label 1 = approved, 0 = denied."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    xs = x.as_tuple()
    step = state.learning_rate * (label - sigmoid(_logit(state, xs)))
    return replace(
        state,
        weights=tuple(w + step * v for w, v in zip(state.weights, xs)),
        bias=state.bias + step,
        update_count=state.update_count + 1,
    )


def weight_deltas(state: PolicyState) -> list[tuple[str, float]]:
    deltas = [
        (name, w - w0)
        for name, w, w0 in zip(FEATURE_NAMES, state.weights, state.warm_start_weights)
    ]
    return sorted(deltas, key=lambda item: abs(item[1]), reverse=True)


# -- warm start ----------------------------------------------------------------


def prior_label(x: FeatureVector) -> int:
    """Engineering prior: deny big risky-pattern changes, risky changes in an area
    with a record of denials, and anything security sensitive."""
    risky = x.change_pattern_risk >= 0.7
    contested = risky and x.prior_denials_norm >= 0.5
    risky_and_large = risky and x.diff_size_norm >= 0.5
    return 0 if risky_and_large or contested or x.is_security_sensitive == 1.0 else 1


@dataclass(frozen=True)
class EngineeringPriorSet:
    examples: tuple[FeatureVector, ...]
    seed: int = DEFAULT_SEED
    epochs: int = 40
    learning_rate: float = 0.5

    def labeled(self) -> list[tuple[FeatureVector, int]]:
        return [(x, prior_label(x)) for x in self.examples]


def _prior_example(
    category: ChangeCategory,
    diff_lines: int,
    files: int,
    *,
    familiar: bool,
    contested: bool = False,
    security_path: bool = False,
    confidence: float | None = None,
) -> FeatureVector:
    paths = tuple(f"{'auth' if security_path else 'pkg'}/f{i}.py" for i in range(files))
    risky = CATEGORY_RISK[category] >= 0.7 or security_path
    p = ActionProposal(
        id=0,
        action_kind=ActionKind.APPLY,
        paths=paths,
        change_category=category,
        diff_lines=diff_lines,
        files_touched=files,
        model_confidence=confidence if confidence is not None else (0.6 if risky else 0.85),
        phase=PHASE_FOR_PRIORS,
    )
    if contested:
        return encode(p, approvals=2, denials=3, first_touch=not familiar, session_rate=0.7)
    if familiar:
        return encode(p, approvals=4, denials=0, first_touch=False, session_rate=0.7)
    return encode(p, approvals=0, denials=1 if risky else 0, first_touch=True, session_rate=0.5)


PHASE_FOR_PRIORS = next(ph for ph, kinds in PHASE_PERMISSIONS.items() if ActionKind.APPLY in kinds)


def default_priors() -> EngineeringPriorSet:
    """30 synthetic situations: every category at a small and a large diff,
    benign categories also cold and at medium size, security-path variants of
    benign categories, and risky categories in an area with a denial record."""
    examples: list[FeatureVector] = []
    for category in ChangeCategory:
        examples.append(_prior_example(category, 8, 1, familiar=True))
        examples.append(_prior_example(category, 320, 6, familiar=False))
    for category in (ChangeCategory.GENERAL, ChangeCategory.TEST, ChangeCategory.DOC):
        examples.append(_prior_example(category, 8, 1, familiar=False))
        examples.append(_prior_example(category, 120, 3, familiar=True))
    for category in (ChangeCategory.GENERAL, ChangeCategory.TEST, ChangeCategory.DOC, ChangeCategory.CONFIG):
        examples.append(_prior_example(category, 20, 2, familiar=False, security_path=True))
    for category in (ChangeCategory.API, ChangeCategory.DATA_MODEL, ChangeCategory.CONFIG):
        examples.append(_prior_example(category, 24, 2, familiar=True, contested=True))
        examples.append(_prior_example(category, 24, 2, familiar=False, contested=True))
    return EngineeringPriorSet(examples=tuple(examples))


def warm_start(
    priors: EngineeringPriorSet | None = None,
    *,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    repo_id: str = "",
) -> PolicyState:
    priors = priors if priors is not None else default_priors()
    data = priors.labeled()
    if not data:
        raise EmptyPriors("warm-start needs at least one prior example")
    rng = random.Random(priors.seed)
    state = PolicyState.zeros(learning_rate=priors.learning_rate, seed=priors.seed)
    order = list(range(len(data)))
    for _ in range(priors.epochs):
        rng.shuffle(order)
        for i in order:
            x, y = data[i]
            state = sgd_update(state, x, y)
    return PolicyState(
        weights=state.weights,
        bias=state.bias,
        learning_rate=learning_rate,
        update_count=0,
        warm_start_weights=state.weights,
        warm_start_bias=state.bias,
        repo_id=repo_id,
        seed=priors.seed,
    )


def train(state: PolicyState, decisions: Iterable[tuple[FeatureVector, int]]) -> PolicyState:
    for x, y in decisions:
        state = sgd_update(state, x, y)
    return state


# -- persistence -------------------------------------------------------------

POLICY_FILE = "policy.json"


def _fmt(v: float) -> str:
    return format(v, ".17g")


def persist(state: PolicyState, store: Path | str) -> Path:
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": STATE_VERSION,
        "repo_id": state.repo_id,
        "weights": [_fmt(w) for w in state.weights],
        "bias": _fmt(state.bias),
        "learning_rate": _fmt(state.learning_rate),
        "update_count": state.update_count,
        "warm_start_weights": [_fmt(w) for w in state.warm_start_weights],
        "warm_start_bias": _fmt(state.warm_start_bias),
        "seed": state.seed,
    }
    target = store / POLICY_FILE
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    tmp.replace(target)
    return target


def load(store: Path | str, repo_id: str | None = None) -> PolicyState:
    target = Path(store) / POLICY_FILE
    if not target.exists():
        raise StateNotFound(f"no policy state at {target}")
    try:
        doc = json.loads(target.read_text(encoding="utf-8"))
        if doc["version"] != STATE_VERSION:
            raise CorruptState(f"unsupported policy version {doc['version']!r}")
        state = PolicyState(
            weights=tuple(float(w) for w in doc["weights"]),
            bias=float(doc["bias"]),
            learning_rate=float(doc["learning_rate"]),
            update_count=int(doc["update_count"]),
            warm_start_weights=tuple(float(w) for w in doc["warm_start_weights"]),
            warm_start_bias=float(doc["warm_start_bias"]),
            repo_id=str(doc["repo_id"]),
            seed=int(doc["seed"]),
        )
    except CorruptState:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptState(f"{target}: {exc}") from exc
    if repo_id is not None and state.repo_id and state.repo_id != repo_id:
        raise CorruptState(f"{target} belongs to repo {state.repo_id}, not {repo_id}")
    return state
