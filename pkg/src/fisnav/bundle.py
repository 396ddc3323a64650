"""Bundled toy scenes and episode suites.

Episodes are authored as legs ``(heading_deg, forward_steps)``; the reference
trajectory is what the simulator produces when those legs are executed from
the start pose, and the goal is its last point.  ``python -m fisnav.bundle``
regenerates the data files and validates them.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

from .geometry import (
    Action,
    Episode,
    Landmark,
    Pose,
    Scene,
    Trajectory,
    load_episodes,
    load_scenes,
    save_episodes,
    save_scene,
    shortest_path_length,
    step,
    wrap_pi,
)

SUCCESS_RADIUS = 0.5


def data_dir() -> Path:
    return Path(str(resources.files("fisnav") / "data"))


def bundled_scenes() -> dict[str, Scene]:
    return load_scenes(data_dir() / "scenes")


def bundled_suite(name: str) -> list[Episode]:
    return load_episodes(data_dir() / "suites" / f"{name}.jsonl")


def _lm(cat: str, x: float, y: float, desc: str) -> Landmark:
    return Landmark(cat, (x, y), desc)


SCENES = [
    Scene("open_room", (0.0, 0.0, 6.0, 6.0), (), (
        _lm("sofa", 5.5, 5.5, "a grey sofa in the far corner"),
        _lm("plant", 0.5, 5.5, "a potted plant near the window"),
        _lm("lamp", 5.5, 0.5, "a floor lamp by the door"),
    )),
    Scene("study", (0.0, 0.0, 5.0, 7.0), ((0.0, 5.5, 1.5, 7.0),), (
        _lm("desk", 0.75, 5.2, "a wooden desk against the wall"),
        _lm("chair", 4.5, 1.0, "an office chair"),
    )),
    Scene("meeting_room", (0.0, 0.0, 7.0, 5.0), ((2.5, 1.8, 4.5, 3.2),), (
        _lm("table", 3.5, 1.5, "a long meeting table in the centre"),
        _lm("screen", 6.8, 2.5, "a wall screen at the end of the room"),
        _lm("chair", 2.2, 2.5, "a chair at the head of the table"),
    )),
    Scene("lounge", (0.0, 0.0, 6.0, 6.0), ((0.0, 4.8, 2.5, 6.0), (2.6, 2.6, 3.4, 3.4), (5.0, 0.0, 6.0, 1.5)), (
        _lm("sofa", 1.25, 4.6, "a red sofa along the wall"),
        _lm("table", 3.0, 2.4, "a small coffee table"),
        _lm("umbrella", 4.8, 0.75, "an umbrella stand by the cabinet"),
    )),
    Scene("corridor", (0.0, 0.0, 10.0, 2.0), ((4.6, 0.0, 5.4, 0.7),), (
        _lm("door", 9.8, 1.0, "a door at the end of the corridor"),
        _lm("pillar", 5.0, 0.8, "a pillar on the right side"),
    )),
    Scene("cluttered_a", (0.0, 0.0, 6.0, 6.0), (
        (1.5, 1.5, 2.2, 2.2), (3.6, 1.0, 4.3, 1.8), (2.6, 3.6, 3.4, 4.2), (4.6, 4.2, 5.3, 5.0)), (
        _lm("box", 1.85, 2.4, "a cardboard box"),
        _lm("chair", 3.0, 4.4, "a folding chair"),
    )),
    Scene("cluttered_b", (0.0, 0.0, 6.0, 6.0), (
        (1.0, 3.0, 1.8, 3.8), (2.8, 1.2, 3.6, 2.0), (4.0, 3.4, 4.6, 4.4), (2.4, 4.8, 3.2, 5.4)), (
        _lm("crate", 3.2, 2.2, "a stack of crates"),
        _lm("bin", 4.3, 3.2, "a recycling bin"),
    )),
    Scene("l_room", (0.0, 0.0, 6.0, 6.0), ((3.0, 3.0, 6.0, 6.0),), (
        _lm("cabinet", 2.8, 5.5, "a tall cabinet at the top of the room"),
        _lm("bed", 5.5, 0.6, "a bed in the lower wing"),
    )),
]

# episode id -> (scene id, start (x, y, heading_deg), legs, instruction)
EPISODE_SPECS: dict[str, tuple] = {
    "open_room/0": ("open_room", (1.0, 1.0, 0.0), [(30, 12)], "walk towards the sofa in the far corner"),
    "open_room/1": ("open_room", (5.0, 1.0, 90.0), [(150, 12)], "go to the plant near the window"),
    "study/0": ("study", (1.0, 1.0, 90.0), [(60, 14)], "head past the chair toward the desk side"),
    "study/1": ("study", (4.0, 1.0, 180.0), [(120, 14)], "walk up the room away from the chair"),
    "meeting_room/0": ("meeting_room", (1.0, 1.0, 0.0), [(60, 11), (45, 5)], "walk around the table to the top side"),
    "meeting_room/1": ("meeting_room", (1.0, 4.0, 0.0), [(300, 11), (315, 5)], "go around the table to the bottom side"),
    "lounge/0": ("lounge", (1.0, 1.0, 90.0), [(60, 12), (45, 4)], "walk past the coffee table toward the sofa"),
    "lounge/1": ("lounge", (4.5, 2.0, 180.0), [(165, 12)], "go to the left side of the room"),
    "corridor/0": ("corridor", (3.0, 1.0, 0.0), [(0, 10), (-30, 6)], "walk down the corridor past the pillar"),
    "corridor/1": ("corridor", (9.0, 1.5, 180.0), [(195, 13)], "walk back toward the start of the corridor"),
    "cluttered_a/0": ("cluttered_a", (0.6, 0.6, 0.0), [(15, 7), (45, 8)], "weave between the boxes"),
    "cluttered_a/1": ("cluttered_a", (5.4, 0.6, 90.0), [(180, 6), (150, 6)], "go left past the box"),
    "cluttered_b/0": ("cluttered_b", (0.6, 0.6, 0.0), [(45, 6), (75, 10)], "walk up between the crates"),
    "cluttered_b/1": ("cluttered_b", (5.4, 5.4, 180.0), [(210, 12)], "head down toward the crates"),
    "l_room/0": ("l_room", (1.0, 5.0, 270.0), [(300, 12)], "go down toward the lower wing"),
    "l_room/1": ("l_room", (5.0, 1.0, 180.0), [(150, 10)], "walk out of the lower wing"),
}

NAV4 = ["open_room/0", "meeting_room/0", "lounge/0", "cluttered_a/0"]

QA_SPECS = [
    ("qa/open_room/0", "open_room", (3.0, 3.0, 0.0), "what is in the far corner", "sofa"),
    ("qa/lounge/0", "lounge", (4.0, 2.0, 90.0), "what stands by the cabinet", "umbrella"),
    ("qa/study/0", "study", (2.5, 3.0, 0.0), "what is against the wall", "desk"),
]


def _turns_to(pose: Pose, heading: float, scene: Scene) -> list[Action]:
    diff = wrap_pi(heading - pose.heading)
    n = int(round(abs(diff) / scene.turn_angle))
    return [Action.TURN_LEFT if diff > 0 else Action.TURN_RIGHT] * n


def legs_to_actions(scene: Scene, start: Pose, legs) -> list[Action]:
    pose = start
    actions: list[Action] = []
    for heading_deg, n in legs:
        for a in _turns_to(pose, math.radians(heading_deg), scene) + [Action.FORWARD] * n:
            res = step(pose, a, scene)
            if res.collided:
                raise ValueError(f"leg ({heading_deg}, {n}) collides at {pose.position}")
            pose = res.new_pose
            actions.append(a)
    return actions + [Action.STOP]


def build_episode(ep_id: str, scene: Scene, start_spec, legs, instruction: str) -> Episode:
    start = Pose((start_spec[0], start_spec[1]), math.radians(start_spec[2]))
    pose, pts = start, [start.position]
    for a in legs_to_actions(scene, start, legs):
        pose = step(pose, a, scene).new_pose
        if a is Action.FORWARD:
            pts.append(pose.position)
    return Episode(ep_id, scene.id, start, instruction, pts[-1], Trajectory(tuple(pts)), SUCCESS_RADIUS)


def validate_episode(ep: Episode, scene: Scene, tol: float = 1e-9) -> None:
    ref = ep.reference_trajectory
    shortest = shortest_path_length(scene, ep.start.position, ep.goal)
    if ref.path_length > shortest + tol:
        raise ValueError(f"{ep.id}: reference ({ref.path_length:.4f}) longer than geodesic ({shortest:.4f})")


def build_all() -> tuple[list[Scene], dict[str, list[Episode]]]:
    scenes = {s.id: s for s in SCENES}
    eps = {k: build_episode(k, scenes[v[0]], v[1], v[2], v[3]) for k, v in EPISODE_SPECS.items()}
    for ep in eps.values():
        validate_episode(ep, scenes[ep.scene_id])
    qa = []
    for qid, sid, (x, y, h), question, answer in QA_SPECS:
        start = Pose((x, y), math.radians(h))
        qa.append(Episode(qid, sid, start, question, start.position, Trajectory((start.position,)),
                          SUCCESS_RADIUS, "question_answer", answer))
    suites = {"nav4": [eps[k] for k in NAV4], "all": list(eps.values()), "qa": qa}
    return list(scenes.values()), suites


def write_bundle(root: Path) -> None:
    scenes, suites = build_all()
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "suites").mkdir(parents=True, exist_ok=True)
    for s in scenes:
        save_scene(s, root / "scenes" / f"{s.id}.json")
    for name, eps in suites.items():
        save_episodes(eps, root / "suites" / f"{name}.jsonl")
    write_corpus(root / "corpus" / "traces.jsonl", {s.id: s for s in scenes}, suites["all"])


CORPUS_SIZE = 200


def write_corpus(path: Path, scenes: dict[str, Scene], suite: list[Episode], size: int = CORPUS_SIZE,
                 seed: int = 0) -> None:
    """Clean mock traces for every reference step, subsampled to ``size``
    records (kept in episode/step order)."""
    import json

    import numpy as np

    from .cot_engine import GeneratorEndpoint, load_dataset, synthesize_dataset

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".all.jsonl")
    synthesize_dataset(suite, GeneratorEndpoint(corruption_rate=0.0, seed=seed), tmp, scenes)
    records = load_dataset(tmp)
    tmp.unlink()
    keep = sorted(np.random.default_rng(seed).choice(len(records), size=size, replace=False))
    with open(path, "w", encoding="utf-8") as fh:
        for i in keep:
            fh.write(json.dumps(records[i], sort_keys=True) + "\n")


def bundled_corpus() -> list[dict]:
    from .cot_engine import load_dataset

    return load_dataset(data_dir() / "corpus" / "traces.jsonl")


if __name__ == "__main__":
    write_bundle(Path(__file__).parent / "data")
