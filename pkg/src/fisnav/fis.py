"""Fast-in-Slow dual-rate controller.

A slow aggregator turns the observation history and instruction into a latent
vector every ``n`` fast steps; the fast policy samples actions from the current
observation concatenated with the most recently completed latent, ``H`` actions
per chunk.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import ACTIONS, Action, Episode, EpisodeSim, ObservationVector, Scene, Trajectory
from .policy import NavPolicy, ParamVector, ShapeMismatch, forward, sample_index

INSTRUCTION_WIDTH = 8
MODES = ("dual", "slow_only", "fast_only")


@dataclass(frozen=True)
class LatentGuidance:
    h: np.ndarray
    produced_at_step: int

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=float).ravel()
        if not np.all(np.isfinite(h)):
            raise ValueError("latent must be finite")
        object.__setattr__(self, "h", h)


@dataclass(frozen=True)
class FisConfig:
    n: int = 3
    H: int = 3
    latent_width: int = 16
    slow_cost: float = 5.0
    fast_cost: float = 1.0
    open_loop: bool = False
    mode: str = "dual"

    def __post_init__(self) -> None:
        if self.n < 1 or self.H < 1:
            raise ValueError("n and H must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return {"n": self.n, "H": self.H, "latent_width": self.latent_width, "slow_cost": self.slow_cost,
                "fast_cost": self.fast_cost, "open_loop": self.open_loop, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "FisConfig":
        return cls(**d)


def instruction_features(text: str, width: int = INSTRUCTION_WIDTH) -> np.ndarray:
    """Hashed bag-of-words, L2-normalised (zero for empty text)."""
    v = np.zeros(width)
    for tok in text.lower().split():
        v[zlib.crc32(tok.encode("utf-8")) % width] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def slow_layout(obs_width: int, latent_width: int, instr_width: int = INSTRUCTION_WIDTH):
    return (("W", (latent_width, 2 * obs_width + instr_width)), ("b", (latent_width,)))


def init_slow(seed: int, obs_width: int = 19, latent_width: int = 16, scale: float = 0.5) -> ParamVector:
    layout = slow_layout(obs_width, latent_width)
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, scale / math.sqrt(layout[0][1][1]), layout[0][1])
    return ParamVector(np.concatenate([W.ravel(), np.zeros(latent_width)]), layout)


def slow_inputs(history: Sequence[ObservationVector], instr: np.ndarray, obs_width: int) -> np.ndarray:
    if history:
        obs = np.array([o.as_array() if isinstance(o, ObservationVector) else o for o in history], dtype=float)
        if obs.shape[1] != obs_width:
            raise ShapeMismatch(f"observations have width {obs.shape[1]}, expected {obs_width}")
        mean, last = obs.mean(axis=0), obs[-1]
    else:
        mean = last = np.zeros(obs_width)
    return np.concatenate([mean, last, np.asarray(instr, dtype=float)])


def slow_update(history: Sequence[ObservationVector], instruction_features: np.ndarray, slow_params: ParamVector,
                produced_at_step: int = 0) -> LatentGuidance:
    b = slow_params.blocks()
    W, bias = b["W"], b["b"]
    instr = np.asarray(instruction_features, dtype=float)
    obs_width = (W.shape[1] - instr.size) // 2
    if 2 * obs_width + instr.size != W.shape[1]:
        raise ShapeMismatch("instruction feature width does not match slow layout")
    x = slow_inputs(history, instr, obs_width)
    return LatentGuidance(np.tanh(W @ x + bias), produced_at_step)


class SlowSchedule:
    """Latent source for the fast policy: refreshes at steps 0, n, 2n, ...

    Called once per fast step with the observation history (current
    observation included); returns the latent in force and the step at which
    it was produced.
    """

    def __init__(self, slow_params: ParamVector, cfg: FisConfig, instruction: str):
        self.slow_params = slow_params
        self.cfg = cfg
        self.instr = instruction_features(instruction)
        self.latest: LatentGuidance | None = None
        self.invocations: list[int] = []

    def __call__(self, history: Sequence[ObservationVector], step: int) -> tuple[np.ndarray, int]:
        if self.cfg.mode == "fast_only":
            return np.zeros(self.cfg.latent_width), 0
        n = 1 if self.cfg.mode == "slow_only" else self.cfg.n
        if self.latest is None or step % n == 0:
            self.latest = slow_update(history, self.instr, self.slow_params, step)
            self.invocations.append(step)
        return self.latest.h, self.latest.produced_at_step


@dataclass
class EpisodeLog:
    episode_id: str
    steps: list[dict] = field(default_factory=list)
    slow_steps: list[int] = field(default_factory=list)
    chunks: list[list[str]] = field(default_factory=list)
    total_cost: float = 0.0
    trajectory: Trajectory | None = None
    log_probs: list[float] = field(default_factory=list)

    @property
    def actions(self) -> list[str]:
        return [s["action"] for s in self.steps]

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "steps": self.steps,
            "slow_steps": self.slow_steps,
            "chunks": self.chunks,
            "total_cost": self.total_cost,
            "trajectory": [list(p) for p in self.trajectory.points] if self.trajectory else None,
        }


def obs_digest(obs: ObservationVector) -> str:
    return hashlib.blake2b(obs.as_array().tobytes(), digest_size=8).hexdigest()


def fast_chunk(obs_window: list[ObservationVector], h: LatentGuidance, fast_params: ParamVector,
               rng_seed: np.random.Generator | int, *, sim: EpisodeSim | None = None, horizon: int = 3,
               policy: NavPolicy | None = None, latent_source: SlowSchedule | None = None,
               open_loop: bool = False, forced: list[Action] | None = None,
               log: EpisodeLog | None = None) -> list[Action]:
    """Sample up to ``horizon`` actions.

    Closed loop (default): each action is sampled from the newest observation
    and executed in ``sim`` before the next is drawn; ``obs_window`` grows in
    place.  Open loop: all actions are drawn from the window's last
    observation.  The chunk ends early on STOP or when the episode finishes.
    Without ``sim`` the chunk is necessarily open loop.
    """
    policy = policy or NavPolicy(obs_width=obs_window[-1].width if obs_window else 19, latent_width=h.h.size)
    if not obs_window:
        raise ValueError("obs_window must hold at least one observation")
    rng = np.random.default_rng(rng_seed) if not isinstance(rng_seed, np.random.Generator) else rng_seed
    open_loop = open_loop or sim is None
    actions: list[Action] = []
    latent = h
    for k in range(horizon):
        if sim is not None and sim.done:
            break
        if k > 0 and not open_loop:
            obs_window.append(sim.observation())
        obs = obs_window[-1]
        step_index = sim.step_index if sim is not None else k
        if k > 0 and latent_source is not None and not open_loop:
            hv, produced = latent_source(obs_window, step_index)
            latent = LatentGuidance(hv, produced)
        logp = forward(fast_params, policy.features(obs, latent.h))[1][0]
        if forced is not None:
            if not forced:
                break
            a = Action(forced.pop(0))
        else:
            a = ACTIONS[sample_index(np.exp(logp), rng.random())]
        if log is not None:
            log.steps.append({"step": step_index, "obs_digest": obs_digest(obs),
                              "latent_step": latent.produced_at_step, "action": a.value})
            log.log_probs.append(float(logp[a.index]))
        actions.append(a)
        if sim is not None:
            sim.apply(a)
        if a is Action.STOP:
            break
    return actions


def run_episode(episode: Episode, cfg: FisConfig, slow_params: ParamVector, fast_params: ParamVector,
                budget: int, seed: int | np.random.Generator, *, scene: Scene, policy: NavPolicy | None = None,
                stop_on_arrival: bool = True, forced_actions: Sequence[Action] | None = None) -> EpisodeLog:
    if budget < 1:
        raise ValueError("budget must be at least 1")
    policy = policy or NavPolicy(latent_width=cfg.latent_width)
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    sim = EpisodeSim(episode, scene, budget, stop_on_arrival=stop_on_arrival, n_rays=policy.obs_width - 3)
    schedule = SlowSchedule(slow_params, cfg, episode.instruction)
    log = EpisodeLog(episode.id)
    history: list[ObservationVector] = []
    forced = list(forced_actions) if forced_actions is not None else None
    while not sim.done:
        if forced is not None and not forced:
            break
        history.append(sim.observation())
        hv, produced = schedule(history, sim.step_index)
        chunk = fast_chunk(history, LatentGuidance(hv, produced), fast_params, rng, sim=sim, horizon=cfg.H,
                           policy=policy, latent_source=schedule, open_loop=cfg.open_loop, forced=forced, log=log)
        log.chunks.append([a.value for a in chunk])
    log.slow_steps = list(schedule.invocations)
    n_fast = len(log.steps)
    if cfg.mode == "slow_only":
        log.total_cost = cfg.slow_cost * n_fast
    else:
        log.total_cost = cfg.slow_cost * len(log.slow_steps) + cfg.fast_cost * n_fast
    log.trajectory = sim.trajectory
    return log
