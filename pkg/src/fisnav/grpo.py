"""Group Relative Policy Optimization over the hand-differentiated policies."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import IO, Protocol, Sequence

import numpy as np

from .fis import FisConfig, SlowSchedule
from .geometry import Episode, Scene
from .policy import (
    NavPolicy,
    ParamVector,
    Rollout,
    TracePolicy,
    kl_and_grad,
    rollout_log_probs,
    sample_nav_rollout,
    sample_trace_rollout,
    weighted_log_prob_grad,
)
from .rewards import Candidate, LexicalScorer, RewardBreakdown, RewardConfig, SemanticScorer, WrongDecisionKind, total_reward
from .trace_format import format_reward


class DegenerateGroup(ValueError):
    pass


def derive_seed(*parts: int | str) -> int:
    """Order-independent per-candidate seed from (global seed, iteration, episode id, index, ...)."""
    key = [p if isinstance(p, int) else zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0])


KL_REDUCTIONS = ("sequence", "context")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.02
    learning_rate: float = 1e-2
    iterations: int = 100
    degenerate_std_floor: float = 1e-8
    seed: int = 0
    inner_steps: int = 1
    eval_every: int = 10
    eval_samples: int = 4
    kl_reduction: str = "sequence"

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.kl_reduction not in KL_REDUCTIONS:
            raise ValueError(f"kl_reduction must be one of {KL_REDUCTIONS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GrpoConfig":
        return cls(**d)


def compute_advantages(rewards: Sequence[float], floor: float = 1e-8) -> list[float]:
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("need at least one reward")
    mean = r.mean()
    std = math.sqrt(float(((r - mean) ** 2).mean()))
    if std < floor:
        return [0.0] * r.size
    return [float(v) for v in (r - mean) / std]


@dataclass(frozen=True, eq=False)
class CandidateGroup:
    episode_id: str
    rollouts: tuple[Rollout, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    old_log_probs: tuple[tuple[float, ...], ...]
    breakdowns: tuple[RewardBreakdown, ...] = ()

    @classmethod
    def build(cls, episode_id: str, rollouts: Sequence[Rollout], rewards: Sequence[float], floor: float = 1e-8,
              breakdowns: Sequence[RewardBreakdown] = ()) -> "CandidateGroup":
        return cls(episode_id, tuple(rollouts), tuple(float(r) for r in rewards),
                   tuple(compute_advantages(rewards, floor)), tuple(r.log_probs for r in rollouts), tuple(breakdowns))

    @property
    def contexts(self) -> np.ndarray:
        rows = [r.features for r in self.rollouts if len(r.choices)]
        return np.concatenate(rows) if rows else np.zeros((0, 0))


def _clip_terms(ratio: float, adv: float, eps: float) -> tuple[float, bool]:
    """Value of min(rho A, clip(rho) A) and whether gradient flows through rho."""
    clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
    unclipped_v, clipped_v = ratio * adv, clipped * adv
    if unclipped_v <= clipped_v:
        return unclipped_v, True
    return clipped_v, False


def grpo_objective_and_grad(params: ParamVector, old_params: ParamVector | None, ref_params: ParamVector,
                            group: CandidateGroup, cfg: GrpoConfig) -> tuple[float, ParamVector]:
    """(1/G) sum_i min(rho_i A_i, clip(rho_i) A_i) - beta * KL(pi || pi_ref) and its exact gradient.

    rho_i uses sequence-level summed log-probabilities; the old ones come from
    the group (recorded at sampling) unless ``old_params`` is given and the
    group carries none.  KL is exact on the categorical distributions at every
    context the group visited; with ``kl_reduction="sequence"`` it is the
    whole-output KL (per-step terms summed per candidate, averaged over the
    group), with ``"context"`` the plain mean over contexts.
    """
    G = len(group.rollouts)
    if G < 2:
        raise DegenerateGroup("a group needs at least two candidates")
    value = 0.0
    grad = np.zeros(len(params))
    rows, choices, weights = [], [], []
    for i, ro in enumerate(group.rollouts):
        if not len(ro.choices):
            continue
        adv = group.advantages[i]
        old = group.old_log_probs[i] if group.old_log_probs else None
        old_sum = float(sum(old)) if old is not None else float(rollout_log_probs(old_params, ro).sum())
        new_lp = rollout_log_probs(params, ro)
        ratio = math.exp(float(new_lp.sum()) - old_sum)
        v, flows = _clip_terms(ratio, adv, cfg.clip_eps)
        value += v / G
        if flows and adv != 0.0:
            rows.append(ro.features)
            choices.append(np.asarray(ro.choices))
            weights.append(np.full(len(ro.choices), ratio * adv / G))
    if rows:
        _, g = weighted_log_prob_grad(params, np.concatenate(rows), np.concatenate(choices), np.concatenate(weights))
        grad += g
    ctx = group.contexts
    if cfg.kl_beta > 0 and len(ctx):
        kl, kg = kl_and_grad(params, ref_params, ctx)
        # "sequence": KL between whole-output distributions, i.e. per-step KLs
        # summed along each candidate and averaged over the group
        scale = len(ctx) / G if cfg.kl_reduction == "sequence" else 1.0
        value -= cfg.kl_beta * scale * kl
        grad -= cfg.kl_beta * scale * kg
    return value, params.with_data(grad)


# --- tasks --------------------------------------------------------------------------

class Task(Protocol):
    kind: str

    def sample(self, params: ParamVector, episode: Episode, seed: int) -> Rollout: ...

    def candidate(self, rollout: Rollout) -> Candidate: ...

    def success(self, rollout: Rollout, episode: Episode) -> bool: ...


@dataclass
class NavTask:
    """Navigation rollouts through the dual-rate controller (slow side frozen)."""

    scenes: dict[str, Scene]
    slow_params: ParamVector
    fis: FisConfig = field(default_factory=FisConfig)
    policy: NavPolicy = field(default_factory=NavPolicy)
    max_steps: int = 48
    stop_on_arrival: bool = True
    kind: str = "navigation"

    def sample(self, params: ParamVector, episode: Episode, seed: int) -> Rollout:
        schedule = SlowSchedule(self.slow_params, self.fis, episode.instruction)
        return sample_nav_rollout(params, self.policy, episode, self.scenes[episode.scene_id], seed,
                                  self.max_steps, schedule, self.stop_on_arrival)

    def candidate(self, rollout: Rollout) -> Candidate:
        return Candidate(rollout.traces, rollout.trajectory)

    def success(self, rollout: Rollout, episode: Episode) -> bool:
        return math.dist(rollout.trajectory.last, episode.goal) < episode.success_radius


@dataclass
class TraceTask:
    """Free-form token traces; the episode only supplies the reward context."""

    scenes: dict[str, Scene]
    policy: TracePolicy = field(default_factory=TracePolicy)
    kind: str = "trace"

    def sample(self, params: ParamVector, episode: Episode, seed: int) -> Rollout:
        return sample_trace_rollout(params, self.policy, seed)

    def candidate(self, rollout: Rollout) -> Candidate:
        return Candidate(rollout.traces, None)

    def success(self, rollout: Rollout, episode: Episode) -> bool:
        return format_reward(rollout.traces[-1]) == 1.0


def score(task: Task, rollout: Rollout, episode: Episode, reward_cfg: RewardConfig,
          scorer: SemanticScorer) -> RewardBreakdown:
    scene = task.scenes[episode.scene_id]
    cand = task.candidate(rollout)
    if episode.task_kind == "navigation" and cand.trajectory is None and "navigation" in reward_cfg.enabled:
        # trace-only candidates on navigation episodes carry no path to score
        reward_cfg = RewardConfig(reward_cfg.k_path, reward_cfg.k_end, reward_cfg.path_metric,
                                  (reward_cfg.enabled - {"navigation"}) or {"format"})
    try:
        return total_reward(cand, episode, scene, reward_cfg, scorer)
    except WrongDecisionKind:
        fmt = total_reward(cand, episode, scene, RewardConfig(enabled={"format"}), scorer).format
        return RewardBreakdown(format=fmt if "format" in reward_cfg.enabled else None, ans=0.0, sem=0.0)


def sample_group(task: Task, params: ParamVector, episode: Episode, cfg: GrpoConfig, iteration: int,
                 reward_cfg: RewardConfig, scorer: SemanticScorer) -> CandidateGroup:
    rollouts = [task.sample(params, episode, derive_seed(cfg.seed, iteration, episode.id, i))
                for i in range(cfg.group_size)]
    breakdowns = [score(task, ro, episode, reward_cfg, scorer) for ro in rollouts]
    return CandidateGroup.build(episode.id, rollouts, [b.total for b in breakdowns], cfg.degenerate_std_floor,
                                breakdowns)


def evaluate_success(task: Task, params: ParamVector, suite: Sequence[Episode], samples: int, seed: int) -> float:
    hits = [task.success(task.sample(params, ep, derive_seed(seed, "eval", ep.id, j)), ep)
            for ep in suite for j in range(samples)]
    return float(np.mean(hits)) if hits else 0.0


def probe_contexts(task: Task, params: ParamVector, suite: Sequence[Episode], seed: int, samples: int = 2) -> np.ndarray:
    rows = [task.sample(params, ep, derive_seed(seed, "probe", ep.id, j)).features
            for ep in suite for j in range(samples)]
    rows = [r for r in rows if len(r)]
    return np.concatenate(rows)


@dataclass
class TrainReport:
    rows: list[dict]
    final_params: ParamVector
    final_kl: float
    checkpoint: str | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)


def train(config: GrpoConfig, reward_cfg: RewardConfig, suite: Sequence[Episode], init_params: ParamVector,
          task: Task, *, scorer: SemanticScorer | None = None, eval_suite: Sequence[Episode] | None = None,
          log: IO[str] | None = None) -> TrainReport:
    """Sample, score, normalise per group, take ``inner_steps`` ascent steps on
    the summed objective, refresh the old policy.  The reference policy stays
    at ``init_params``."""
    if not suite:
        raise ValueError("empty training suite")
    scorer = scorer or LexicalScorer()
    eval_suite = list(eval_suite) if eval_suite is not None else list(suite)
    ref = init_params
    theta = init_params
    probe = probe_contexts(task, ref, suite, config.seed)
    heldout = evaluate_success(task, theta, eval_suite, config.eval_samples, config.seed)
    rows = []
    for it in range(config.iterations):
        old = theta
        groups = [sample_group(task, old, ep, config, it, reward_cfg, scorer) for ep in suite]
        surrogate = 0.0
        for inner in range(config.inner_steps):
            total = np.zeros(len(theta))
            value = 0.0
            for g in groups:
                v, gr = grpo_objective_and_grad(theta, old, ref, g, config)
                value += v
                total += gr.data
            if inner == 0:
                surrogate = value
            theta = theta.with_data(theta.data + config.learning_rate * total)
        ctx = np.concatenate([g.contexts for g in groups if len(g.contexts)])
        kl = kl_and_grad(theta, ref, ctx)[0]
        if config.eval_every and (it + 1) % config.eval_every == 0:
            heldout = evaluate_success(task, theta, eval_suite, config.eval_samples, config.seed)
        rewards = [r for g in groups for r in g.rewards]
        succ = [task.success(ro, ep) for g, ep in zip(groups, suite) for ro in g.rollouts]
        row = {"iteration": it, "mean_reward": float(np.mean(rewards)), "kl": kl, "surrogate": surrogate,
               "train_success": float(np.mean(succ)), "heldout_success": heldout}
        rows.append(row)
        if log is not None:
            log.write(json.dumps(row, sort_keys=True) + "\n")
    final_kl = kl_and_grad(theta, ref, probe)[0]
    return TrainReport(rows, theta, final_kl)
