"""Reasoning-decision trace format: ``<think>..</think>`` followed by exactly
one ``<action>..</action>`` or ``<answer>..</answer>`` block."""

from __future__ import annotations

import re
from dataclasses import dataclass

FORMAT_SPEC = (
    "Reply with your reasoning inside <think>...</think> immediately followed by "
    "the chosen action inside <action>...</action> (or an answer inside "
    "<answer>...</answer>), with nothing before or after."
)

_TAG_RE = re.compile(r"</?(think|action|answer)>")
DECISION_KINDS = ("action", "answer")


class MalformedTrace(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class ParsedTrace:
    think: str
    kind: str  # "action" | "answer"
    decision: str

    def __post_init__(self) -> None:
        if self.kind not in DECISION_KINDS:
            raise ValueError(f"unknown decision kind {self.kind!r}")
        if not self.think.strip():
            raise ValueError("think text must be non-empty")

    @property
    def raw(self) -> str:
        return render_trace(self.think, self.kind, self.decision)

    @property
    def action(self) -> str | None:
        return self.decision if self.kind == "action" else None

    @property
    def answer(self) -> str | None:
        return self.decision if self.kind == "answer" else None


@dataclass(frozen=True)
class FormatVerdict:
    valid: bool
    reason: str | None = None


def render_trace(think: str, kind: str, decision: str) -> str:
    return f"<think>{think}</think><{kind}>{decision}</{kind}>"


def parse_trace(raw: str, lenient: bool = False) -> ParsedTrace:
    """Parse ``raw`` into think text and a single decision.

    Strict mode tolerates only whitespace around and between the two blocks.
    Lenient mode also ignores tag-free prose before the first block and after
    the last one.
    """
    tags = list(_TAG_RE.finditer(raw))
    if not tags:
        raise MalformedTrace("missing tag")
    names = [m.group(0) for m in tags]
    if any(n in names for n in ("<action>", "</action>")) and any(n in names for n in ("<answer>", "</answer>")):
        raise MalformedTrace("both decision variants present")
    if len(set(names)) != len(names):
        raise MalformedTrace("duplicate block")
    kind = "action" if "<action>" in names or "</action>" in names else "answer"
    expected = ["<think>", "</think>", f"<{kind}>", f"</{kind}>"]
    if set(names) != set(expected):
        raise MalformedTrace("missing tag")
    if names != expected:
        raise MalformedTrace("wrong order")
    t_open, t_close, d_open, d_close = tags
    prefix, between, suffix = raw[: t_open.start()], raw[t_close.end(): d_open.start()], raw[d_close.end():]
    if prefix.strip() and not lenient:
        raise MalformedTrace("leading content")
    if between.strip():
        raise MalformedTrace("content between blocks")
    if suffix.strip() and not lenient:
        raise MalformedTrace("trailing content")
    think = raw[t_open.end(): t_close.start()]
    decision = raw[d_open.end(): d_close.start()]
    if not think.strip():
        raise MalformedTrace("empty think")
    if not decision.strip():
        raise MalformedTrace("empty decision")
    return ParsedTrace(think, kind, decision)


def check_format(raw: str, lenient: bool = False) -> FormatVerdict:
    try:
        parse_trace(raw, lenient=lenient)
    except MalformedTrace as exc:
        return FormatVerdict(False, exc.reason)
    return FormatVerdict(True)


def format_reward(raw: str | bytes) -> float:
    if isinstance(raw, (bytes, bytearray)):
        try:
            raw = bytes(raw).decode("utf-8")
        except UnicodeDecodeError:
            return 0.0
    return 1.0 if check_format(raw).valid else 0.0
