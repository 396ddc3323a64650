"""Reasoning-trace data engine: prompt assembly, pluggable generators and the
two-stage (rule, feasibility) filter that produces the cold-start dataset."""

from __future__ import annotations

import json
import math
import re
import threading
import time
import urllib.error
import urllib.request
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    ACTION_NAMES,
    DEFAULT_STEP,
    DEFAULT_TURN_DEG,
    Action,
    Episode,
    ObservationVector,
    Point,
    Pose,
    Scene,
    observe,
    reference_actions,
    step,
    wrap_pi,
)
from .trace_format import FORMAT_SPEC, MalformedTrace, parse_trace, render_trace
from .vocab import think_for

MUTATIONS = ("drop_tag", "swap_order", "empty_think", "illegal_action", "trailing_prose")
STAGES = ("rule", "feasibility", "none")
RULES = ("parse", "think", "feasible_action")
ILLEGAL_ACTION = "JUMP"
TRAILING_PROSE = " Let me double check. <action>STOP</action>"


class GeneratorUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    observation_rendering: str
    feasible_actions: tuple[str, ...]
    format_spec: str = FORMAT_SPEC

    def __post_init__(self) -> None:
        object.__setattr__(self, "feasible_actions", tuple(self.feasible_actions))
        for name in ("instruction", "observation_rendering", "format_spec"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt {name} must be non-empty")
        if not self.feasible_actions:
            raise ValueError("feasible_actions must be non-empty")
        unknown = set(self.feasible_actions) - set(ACTION_NAMES)
        if unknown:
            raise ValueError(f"unknown actions in feasible set: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"instruction": self.instruction, "observation_rendering": self.observation_rendering,
                "feasible_actions": list(self.feasible_actions), "format_spec": self.format_spec}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptBundle":
        return cls(d["instruction"], d["observation_rendering"], tuple(d["feasible_actions"]), d["format_spec"])


@dataclass(frozen=True)
class RawRecord:
    scene_id: str
    episode_id: str
    step_index: int
    prompt: PromptBundle
    raw_response: str

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "episode_id": self.episode_id, "step_index": self.step_index,
                "prompt": self.prompt.to_dict(), "raw_response": self.raw_response}

    @classmethod
    def from_dict(cls, d: dict) -> "RawRecord":
        return cls(d["scene_id"], d["episode_id"], int(d["step_index"]), PromptBundle.from_dict(d["prompt"]),
                   d["raw_response"])


@dataclass(frozen=True)
class FilterOutcome:
    kept: bool
    stage: str = "none"
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.kept and (self.stage != "none" or self.reason is not None):
            raise ValueError("kept outcomes carry no stage or reason")
        if not self.kept and self.stage == "none":
            raise ValueError("rejections must name a stage")


KEPT = FilterOutcome(True)


@dataclass(frozen=True)
class GeneratorEndpoint:
    """Either a seeded mock (``kind="mock"``) or an HTTP service."""

    kind: str = "mock"
    corruption_rate: float = 0.0
    seed: int = 0
    step_size: float = DEFAULT_STEP
    turn_deg: float = DEFAULT_TURN_DEG
    stop_radius: float = 0.5
    base_url: str | None = None
    timeout: float = 10.0
    retries: int = 2
    request_fields: dict = field(default_factory=dict)
    response_field: str = "text"
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.kind == "mock":
            if self.base_url is not None:
                raise ValueError("mock endpoint must not set base_url")
            if not 0.0 <= self.corruption_rate <= 1.0:
                raise ValueError("corruption_rate must lie in [0, 1]")
        elif self.kind == "http":
            if not self.base_url:
                raise ValueError("http endpoint needs base_url")
            if self.timeout <= 0 or self.retries < 0:
                raise ValueError("timeout must be positive and retries non-negative")
        else:
            raise ValueError(f"unknown generator kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorEndpoint":
        return cls(**d)


@dataclass
class SynthesisStats:
    raw: int = 0
    rule_rejected: int = 0
    feasibility_rejected: int = 0
    kept: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# --- prompts ----------------------------------------------------------------

_RENDER_RE = re.compile(
    r"rays \(m, right to left\): (?P<rays>[-0-9. ]+); goal bearing (?P<bearing>[-+0-9.]+) deg; "
    r"goal distance (?P<dist>[-0-9.]+) m; progress (?P<frac>[-0-9.]+)$")


def render_observation(obs: ObservationVector) -> str:
    rays = " ".join(f"{r:.3f}" for r in obs.depth_rays)
    return (f"rays (m, right to left): {rays}; goal bearing {math.degrees(obs.goal_bearing):+.3f} deg; "
            f"goal distance {obs.goal_distance:.3f} m; progress {obs.step_fraction:.3f}")


def parse_observation(text: str) -> ObservationVector:
    """Inverse of ``render_observation`` up to its printed precision."""
    m = _RENDER_RE.match(text.strip())
    if m is None:
        raise ValueError("observation rendering does not match the template")
    rays = tuple(float(v) for v in m.group("rays").split())
    return ObservationVector(rays, math.radians(float(m.group("bearing"))), float(m.group("dist")),
                             float(m.group("frac")))


def build_prompt(episode: Episode, step_obs: ObservationVector, feasible: Sequence[Action | str]) -> PromptBundle:
    names = tuple(Action(a).value for a in feasible)
    if not names:
        raise ValueError("feasible must be non-empty")
    return PromptBundle(episode.instruction, render_observation(step_obs), names, FORMAT_SPEC)


# --- generators -------------------------------------------------------------

def mutation_for(seed: int, key: str, rate: float) -> str | None:
    """Seeded corruption schedule: one generator per (seed, key); the first
    uniform draw decides corruption, the second picks the mutation."""
    rng = np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])
    if rng.random() >= rate:
        return None
    return MUTATIONS[int(rng.integers(len(MUTATIONS)))]


def action_cost(distance: float, bearing: float, step_size: float, turn: float) -> float:
    """Goal distance measured in actions: turns to face the goal plus forward
    steps to cover the straight-line gap."""
    return abs(bearing) / turn + distance / step_size


def oracle_action(obs: ObservationVector, feasible: Sequence[str], step_size: float = DEFAULT_STEP,
                  turn_deg: float = DEFAULT_TURN_DEG, stop_radius: float = 0.5) -> str:
    """Feasible action with the smallest post-action goal distance (in
    actions, see ``action_cost``); ties go to action order.  STOP is chosen
    once within ``stop_radius`` and never before.  FORWARD counts as blocked
    when the dead-ahead ray is no longer than one step."""
    if "STOP" in feasible and obs.goal_distance < stop_radius:
        return "STOP"
    d, b = obs.goal_distance, obs.goal_bearing
    ahead = obs.depth_rays[len(obs.depth_rays) // 2]
    turn = math.radians(turn_deg)
    best, best_cost = None, math.inf
    for name in ACTION_NAMES:
        if name not in feasible or name == "STOP":
            continue
        if name == "FORWARD":
            if ahead <= step_size:
                continue
            x, y = d * math.cos(b) - step_size, d * math.sin(b)
            cost = action_cost(math.hypot(x, y), math.atan2(y, x) if (x or y) else 0.0, step_size, turn)
        else:
            sign = 1.0 if name == "TURN_LEFT" else -1.0
            cost = action_cost(d, wrap_pi(b - sign * turn), step_size, turn)
        if cost < best_cost - 1e-12:
            best, best_cost = name, cost
    return best if best is not None else feasible[0]


def mutate(trace: str, think: str, action: str, mutation: str, rng: np.random.Generator) -> str:
    if mutation == "drop_tag":
        tags = ["<think>", "</think>", "<action>", "</action>"]
        victim = tags[int(rng.integers(len(tags)))]
        return trace.replace(victim, "", 1)
    if mutation == "swap_order":
        return f"<action>{action}</action><think>{think}</think>"
    if mutation == "empty_think":
        return render_trace("", "action", action)
    if mutation == "illegal_action":
        return render_trace(think, "action", ILLEGAL_ACTION)
    if mutation == "trailing_prose":
        return trace + TRAILING_PROSE
    raise ValueError(f"unknown mutation {mutation!r}")


def mock_generate(prompt: PromptBundle, endpoint: GeneratorEndpoint, key: str | None = None) -> str:
    obs = parse_observation(prompt.observation_rendering)
    action = oracle_action(obs, prompt.feasible_actions, endpoint.step_size, endpoint.turn_deg,
                           endpoint.stop_radius)
    think = think_for(obs, action)
    trace = render_trace(think, "action", action)
    key = key if key is not None else json.dumps(prompt.to_dict(), sort_keys=True)
    mutation = mutation_for(endpoint.seed, key, endpoint.corruption_rate)
    if mutation is None:
        return trace
    rng = np.random.default_rng([endpoint.seed, zlib.crc32(key.encode("utf-8")), 1])
    return mutate(trace, think, action, mutation, rng)


def http_request_body(prompt: PromptBundle, fields: dict | None = None) -> dict:
    names = {"instruction": "instruction", "observation": "observation",
             "feasible_actions": "feasible_actions", "format_spec": "format_spec", **(fields or {})}
    return {
        names["instruction"]: prompt.instruction,
        names["observation"]: prompt.observation_rendering,
        names["feasible_actions"]: list(prompt.feasible_actions),
        names["format_spec"]: prompt.format_spec,
    }


def http_generate(prompt: PromptBundle, endpoint: GeneratorEndpoint, key: str | None = None) -> str:
    body = json.dumps(http_request_body(prompt, endpoint.request_fields)).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    if key is not None:
        headers["X-Record-Key"] = key
    last: Exception | None = None
    for attempt in range(endpoint.retries + 1):
        req = urllib.request.Request(endpoint.base_url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            text = payload[endpoint.response_field]
            if not isinstance(text, str):
                raise GeneratorUnavailable(f"response field {endpoint.response_field!r} is not a string")
            return text
        except GeneratorUnavailable:
            raise
        except (urllib.error.URLError, OSError, ValueError, KeyError) as exc:
            last = exc
            if attempt < endpoint.retries:
                time.sleep(min(0.05 * 2 ** attempt, 1.0))
    raise GeneratorUnavailable(f"generator at {endpoint.base_url} failed after {endpoint.retries + 1} attempts: {last}")


def generate(prompt: PromptBundle, endpoint: GeneratorEndpoint, key: str | None = None) -> str:
    """One candidate response.  ``key`` identifies the record so the mock's
    corruption schedule does not depend on call order."""
    if endpoint.kind == "mock":
        return mock_generate(prompt, endpoint, key)
    return http_generate(prompt, endpoint, key)


class StubGeneratorServer:
    """Local HTTP service answering generation requests with the mock
    generator; used for integration tests of the HTTP path."""

    def __init__(self, endpoint: GeneratorEndpoint | None = None, host: str = "127.0.0.1", port: int = 0,
                 response_field: str = "text", fail_first: int = 0):
        self.mock = endpoint or GeneratorEndpoint()
        self.response_field = response_field
        self.fail_first = fail_first
        self.requests = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                stub.requests += 1
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                    if stub.requests <= stub.fail_first:
                        raise RuntimeError("injected failure")
                    prompt = PromptBundle(body["instruction"], body["observation"], tuple(body["feasible_actions"]),
                                          body["format_spec"])
                    text = mock_generate(prompt, stub.mock, self.headers.get("X-Record-Key"))
                    out, code = json.dumps({stub.response_field: text}).encode("utf-8"), 200
                except Exception as exc:  # report and keep serving
                    out, code = json.dumps({"error": str(exc)}).encode("utf-8"), 500
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/generate"

    def __enter__(self) -> "StubGeneratorServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


# --- filters ----------------------------------------------------------------

def rule_filter(record: RawRecord) -> FilterOutcome:
    try:
        parsed = parse_trace(record.raw_response, lenient=True)
        parsed = parse_trace(parsed.raw)
    except MalformedTrace as exc:
        return FilterOutcome(False, "rule", f"parse: {exc.reason}")
    if not parsed.think.strip():
        return FilterOutcome(False, "rule", "think: empty reasoning")
    if parsed.kind != "action" or parsed.decision.strip() not in record.prompt.feasible_actions:
        return FilterOutcome(False, "rule", f"feasible_action: {parsed.decision.strip()!r} not offered")
    return KEPT


def canonical_trace(record: RawRecord) -> str:
    parsed = parse_trace(record.raw_response, lenient=True)
    return render_trace(parsed.think, parsed.kind, parsed.decision.strip())


def decided_action(record: RawRecord) -> Action:
    return Action(parse_trace(record.raw_response, lenient=True).decision.strip())


def reference_poses(episode: Episode, scene: Scene) -> list[Pose]:
    """Pose before each reference action (including the final STOP)."""
    pose, out = episode.start, []
    for a in reference_actions(episode, scene):
        out.append(pose)
        pose = step(pose, a, scene).new_pose
    return out


def distance_to_polyline(p: Point, points: Sequence[Point]) -> float:
    pts = np.asarray(points, dtype=float)
    q = np.asarray(p, dtype=float)
    if len(pts) == 1:
        return float(np.linalg.norm(q - pts[0]))
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.divide(np.einsum("ij,ij->i", q - a, ab), denom, out=np.zeros_like(denom), where=denom > 0)
    proj = a + np.clip(t, 0.0, 1.0)[:, None] * ab
    return float(np.min(np.linalg.norm(proj - q, axis=1)))


def feasibility_filter(record: RawRecord, episode: Episode, scene: Scene,
                       tolerance: float | None = None) -> FilterOutcome:
    tolerance = 2.0 * scene.step_size if tolerance is None else tolerance
    poses = reference_poses(episode, scene)
    if not 0 <= record.step_index < len(poses):
        return FilterOutcome(False, "feasibility", "step outside the reference trajectory")
    res = step(poses[record.step_index], decided_action(record), scene)
    if res.collided:
        return FilterOutcome(False, "feasibility", "collision")
    off = distance_to_polyline(res.new_pose.position, episode.reference_trajectory.points)
    if off > tolerance:
        return FilterOutcome(False, "feasibility", f"{off:.3f} m off the reference path")
    return KEPT


# --- synthesis --------------------------------------------------------------

def record_key(episode_id: str, step_index: int) -> str:
    return f"{episode_id}#{step_index}"


def episode_prompts(episode: Episode, scene: Scene, budget: int = 48,
                    feasible: Sequence[str] = ACTION_NAMES) -> list[tuple[int, PromptBundle]]:
    out = []
    for i, pose in enumerate(reference_poses(episode, scene)):
        obs = observe(pose, scene, episode.goal, i, budget)
        out.append((i, build_prompt(episode, obs, feasible)))
    return out


def synthesize_dataset(suite: Sequence[Episode], endpoint: GeneratorEndpoint, out_path: str | Path | None,
                       scenes: dict[str, Scene], *, budget: int = 48, tolerance: float | None = None,
                       workers: int = 1, outcomes: list | None = None) -> SynthesisStats:
    """Generate one trace per reference step of every navigation episode,
    filter, and write kept records (sorted by episode then step) as JSONL."""
    suite = [ep for ep in suite if ep.task_kind == "navigation"]
    if not suite:
        raise ValueError("suite has no navigation episodes")
    jobs = []
    for ep in sorted(suite, key=lambda e: e.id):
        for i, prompt in episode_prompts(ep, scenes[ep.scene_id], budget):
            jobs.append((ep, i, prompt))

    def run(job):
        ep, i, prompt = job
        return RawRecord(ep.scene_id, ep.id, i, prompt, generate(prompt, endpoint, record_key(ep.id, i)))

    n_workers = max(1, min(workers, endpoint.max_in_flight if endpoint.kind == "http" else workers))
    if n_workers == 1:
        records = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            records = list(pool.map(run, jobs))

    stats = SynthesisStats()
    kept_lines = []
    for (ep, _, _), rec in zip(jobs, records):
        stats.raw += 1
        outcome = rule_filter(rec)
        if outcome.kept:
            outcome = feasibility_filter(rec, ep, scenes[ep.scene_id], tolerance)
        if outcomes is not None:
            outcomes.append((rec, outcome))
        if not outcome.kept:
            if outcome.stage == "rule":
                stats.rule_rejected += 1
            else:
                stats.feasibility_rejected += 1
            continue
        stats.kept += 1
        row = rec.to_dict()
        row["trace"] = canonical_trace(rec)
        row["action"] = decided_action(rec).value
        kept_lines.append(json.dumps(row, sort_keys=True))
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in kept_lines)
    return stats


def load_dataset(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
