"""Closed token vocabulary shared by the trace policy, the mock generator and
the templated navigation traces."""

from __future__ import annotations

import math
import re

from .geometry import ACTION_NAMES, ObservationVector

TAGS = ("<think>", "</think>", "<action>", "</action>", "<answer>", "</answer>")
WORDS = ("goal", "left", "right", "ahead", "behind", "near", "far",
         "wall", "clear", "turn", "move", "stop", "arrived")
EOS = "<eos>"
VOCAB: tuple[str, ...] = (*TAGS, *ACTION_NAMES, *WORDS, EOS)
TOKEN_ID = {t: i for i, t in enumerate(VOCAB)}
EOS_ID = TOKEN_ID[EOS]

_SPLIT_RE = re.compile(r"</?(?:think|action|answer)>|[^\s<]+|<")


def tokenize(raw: str) -> list[int]:
    """Token ids of a rendered trace (EOS appended).  Raises KeyError on
    out-of-vocabulary pieces."""
    return [TOKEN_ID[piece] for piece in _SPLIT_RE.findall(raw)] + [EOS_ID]


def detokenize(ids) -> str:
    out: list[str] = []
    prev_plain = False
    for i in ids:
        tok = VOCAB[int(i)]
        if tok == EOS:
            break
        plain = tok not in TAGS
        if plain and prev_plain:
            out.append(" ")
        out.append(tok)
        prev_plain = plain
    return "".join(out)


def summarize_observation(obs: ObservationVector, near: float = 1.0, wall: float = 0.5) -> str:
    """Short vocabulary-only description of an observation."""
    b = obs.goal_bearing
    if abs(b) > math.radians(135):
        side = "behind"
    elif abs(b) <= math.radians(10):
        side = "ahead"
    else:
        side = "left" if b > 0 else "right"
    dist = "near" if obs.goal_distance < near else "far"
    r = len(obs.depth_rays)
    front = min(obs.depth_rays[max(r // 2 - 1, 0): r // 2 + 2])
    return f"goal {side} {dist} {'wall' if front < wall else 'clear'} ahead"


PLAN_WORDS = {"FORWARD": "move ahead", "TURN_LEFT": "turn left", "TURN_RIGHT": "turn right", "STOP": "stop arrived"}


def think_for(obs: ObservationVector, action: str) -> str:
    return f"{summarize_observation(obs)} {PLAN_WORDS[action]}"
