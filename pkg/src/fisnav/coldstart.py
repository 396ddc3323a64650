"""Supervised cold start from the synthesized trace dataset."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .fis import FisConfig, SlowSchedule
from .geometry import Action, Episode, Scene, reference_actions
from .policy import NavPolicy, ParamVector, TracePolicy, bc_step, sample_nav_rollout, sft_step
from .vocab import tokenize


def nav_examples(records: Sequence[dict], suite: Sequence[Episode], scenes: dict[str, Scene],
                 slow_params: ParamVector, fis: FisConfig, policy: NavPolicy,
                 budget: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows along each reference replay (latents from the slow
    schedule), labelled with the dataset's decided action at that step."""
    labels = {(r["episode_id"], int(r["step_index"])): r["action"] for r in records}
    X, y = [], []
    for ep in suite:
        if ep.task_kind != "navigation":
            continue
        scene = scenes[ep.scene_id]
        forced = reference_actions(ep, scene)
        ro = sample_nav_rollout(policy.init(0), policy, ep, scene, 0, max(budget, len(forced)),
                                SlowSchedule(slow_params, fis, ep.instruction), stop_on_arrival=False,
                                forced_actions=forced)
        for t, row in enumerate(ro.features):
            a = labels.get((ep.id, t))
            if a is not None:
                X.append(row)
                y.append(Action(a).index)
    if not X:
        raise ValueError("no dataset records match the suite")
    return np.array(X), np.array(y, dtype=int)


def coldstart_nav(params: ParamVector, X: np.ndarray, y: np.ndarray, epochs: int,
                  learning_rate: float) -> tuple[ParamVector, list[float]]:
    """Full-batch behaviour cloning; returns params and per-epoch loss."""
    losses = []
    for _ in range(epochs):
        params, loss = bc_step(params, X, y, learning_rate)
        losses.append(loss)
    return params, losses


def trace_sequences(records: Sequence[dict], policy: TracePolicy | None = None) -> list[list[int]]:
    policy = policy or TracePolicy()
    seqs = [tokenize(r["trace"]) for r in records]
    return [s for s in seqs if len(s) <= policy.max_len]


def coldstart_trace(params: ParamVector, sequences: Sequence[Sequence[int]], epochs: int, learning_rate: float,
                    policy: TracePolicy | None = None) -> tuple[ParamVector, list[float]]:
    losses = []
    for _ in range(epochs):
        params, loss = sft_step(params, sequences, learning_rate, policy)
        losses.append(loss)
    return params, losses
