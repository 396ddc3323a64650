"""Format, understanding and navigation rewards and their task-typed sum."""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .geometry import ACTION_NAMES, Episode, Point, Scene, Trajectory
from .metrics import discrete_frechet, dtw
from .trace_format import MalformedTrace, ParsedTrace, format_reward, parse_trace

REWARD_GROUPS = ("format", "understanding", "navigation")
PATH_METRICS = {"frechet": discrete_frechet, "dtw": dtw}


class WrongDecisionKind(ValueError):
    pass


class SemanticScorer(Protocol):
    def score(self, context_description: str, answer: str) -> float: ...


_WORD_RE = re.compile(r"[a-z0-9]+")


def _hashed_bow(text: str, dim: int) -> dict[int, float]:
    vec: dict[int, float] = {}
    for tok in _WORD_RE.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little") % dim
        vec[h] = vec.get(h, 0.0) + 1.0
    return vec


@dataclass(frozen=True)
class LexicalScorer:
    """Cosine similarity of hashed bag-of-words vectors, clamped to [0, 1]."""

    dim: int = 1 << 20

    def score(self, context_description: str, answer: str) -> float:
        a, b = _hashed_bow(context_description, self.dim), _hashed_bow(answer, self.dim)
        if not a or not b:
            return 0.0
        dot = sum(v * b.get(k, 0.0) for k, v in a.items())
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        return min(max(dot / (na * nb), 0.0), 1.0)


@dataclass(frozen=True)
class ConstantScorer:
    value: float

    def score(self, context_description: str, answer: str) -> float:
        return self.value


@dataclass(frozen=True)
class RewardConfig:
    k_path: float = 1.0
    k_end: float = 1.0
    path_metric: str = "frechet"
    enabled: frozenset[str] = field(default_factory=lambda: frozenset(REWARD_GROUPS))

    def __post_init__(self) -> None:
        if self.k_path <= 0 or self.k_end <= 0:
            raise ValueError("decay coefficients must be positive")
        if self.path_metric not in PATH_METRICS:
            raise ValueError(f"unknown path metric {self.path_metric!r}")
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        if not self.enabled or not self.enabled <= set(REWARD_GROUPS):
            raise ValueError(f"enabled must be a non-empty subset of {REWARD_GROUPS}")

    def to_dict(self) -> dict:
        return {"k_path": self.k_path, "k_end": self.k_end, "path_metric": self.path_metric,
                "enabled": sorted(self.enabled)}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        d = dict(d)
        if "enabled" in d:
            d["enabled"] = frozenset(d["enabled"])
        return cls(**d)


@dataclass(frozen=True)
class RewardBreakdown:
    """Components not active for the task (or disabled) are ``None``."""

    format: float | None = None
    ans: float | None = None
    sem: float | None = None
    path: float | None = None
    end: float | None = None

    @property
    def total(self) -> float:
        return sum(v for v in (self.format, self.ans, self.sem, self.path, self.end) if v is not None)

    def to_dict(self) -> dict:
        return {"format": self.format, "ans": self.ans, "sem": self.sem, "path": self.path,
                "end": self.end, "total": self.total}


def _normalize_answer(s: str) -> str:
    return " ".join(s.split()).casefold()


def answer_reward(predicted: str, ground_truth: str) -> float:
    return 1.0 if _normalize_answer(predicted) == _normalize_answer(ground_truth) else 0.0


def semantic_reward(scorer: SemanticScorer, context: str, answer: str) -> float:
    return float(scorer.score(context, answer))


def understanding_reward(parsed: ParsedTrace, episode: Episode, scene: Scene,
                         scorer: SemanticScorer) -> tuple[float, float, float]:
    if parsed.kind != "answer":
        raise WrongDecisionKind("understanding reward needs an answer decision")
    ans = answer_reward(parsed.decision, episode.ground_truth_answer or "")
    sem = semantic_reward(scorer, scene.context_description(), parsed.decision)
    return ans, sem, ans + sem


def path_reward(pred: Trajectory, ref: Trajectory, cfg: RewardConfig) -> float:
    return math.exp(-cfg.k_path * PATH_METRICS[cfg.path_metric](pred, ref))


def endpoint_reward(final: Point, goal: Point, cfg: RewardConfig) -> float:
    sq = (goal[0] - final[0]) ** 2 + (goal[1] - final[1]) ** 2
    return math.exp(-cfg.k_end * sq)


@dataclass(frozen=True)
class Candidate:
    """One sampled response: its trace string(s) and, for navigation, the
    executed trajectory (whose last point is the final position)."""

    traces: tuple[str, ...]
    trajectory: Trajectory | None = None

    @property
    def final(self) -> Point | None:
        return self.trajectory.last if self.trajectory is not None else None


def trace_format_score(traces: Sequence[str]) -> float:
    """1.0 iff every trace is well-formed and any action decision names a
    known action."""
    if not traces:
        return 0.0
    for raw in traces:
        if not format_reward(raw):
            return 0.0
        parsed = parse_trace(raw)
        if parsed.kind == "action" and parsed.decision.strip() not in ACTION_NAMES:
            return 0.0
    return 1.0


def total_reward(candidate: Candidate, episode: Episode, scene: Scene, cfg: RewardConfig,
                 scorer: SemanticScorer | None = None) -> RewardBreakdown:
    scorer = scorer or LexicalScorer()
    fmt = trace_format_score(candidate.traces) if "format" in cfg.enabled else None
    if episode.task_kind == "navigation":
        if "navigation" not in cfg.enabled:
            return RewardBreakdown(format=fmt)
        if candidate.trajectory is None:
            raise ValueError("navigation candidates need an executed trajectory")
        return RewardBreakdown(
            format=fmt,
            path=path_reward(candidate.trajectory, episode.reference_trajectory, cfg),
            end=endpoint_reward(candidate.final, episode.goal, cfg),
        )
    if "understanding" not in cfg.enabled:
        return RewardBreakdown(format=fmt)
    try:
        parsed = parse_trace(candidate.traces[-1]) if candidate.traces else None
    except MalformedTrace:
        parsed = None
    if parsed is None:
        # unparseable output carries no answer: both understanding terms are zero
        return RewardBreakdown(format=fmt, ans=0.0, sem=0.0)
    ans, sem, _ = understanding_reward(parsed, episode, scene, scorer)
    return RewardBreakdown(format=fmt, ans=ans, sem=sem)
