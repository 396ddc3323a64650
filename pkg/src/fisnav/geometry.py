"""2D continuous navigation simulator.

Scenes are axis-aligned rectangles inside a rectangular boundary.  The agent
moves with a closed four-action vocabulary; a forward move whose swept segment
touches an obstacle or leaves the boundary is blocked (no sliding).
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
DEFAULT_STEP = 0.25
DEFAULT_TURN_DEG = 15.0
DEFAULT_RAYS = 16
GRID_CELL = 0.05

Point = tuple[float, float]
Rect = tuple[float, float, float, float]  # (xmin, ymin, xmax, ymax)


class NoPathError(RuntimeError):
    """Raised when the geodesic grid has no route between two points."""


class Action(str, enum.Enum):
    FORWARD = "FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"
    STOP = "STOP"

    @property
    def index(self) -> int:
        return ACTIONS.index(self)


ACTIONS: tuple[Action, ...] = tuple(Action)
ACTION_NAMES: tuple[str, ...] = tuple(a.value for a in ACTIONS)


def wrap_heading(theta: float) -> float:
    """Map an angle onto [0, 2*pi)."""
    h = math.fmod(theta, TWO_PI)
    if h < 0.0:
        h += TWO_PI
    if h >= TWO_PI:
        h = 0.0
    return h


def wrap_pi(theta: float) -> float:
    """Map an angle onto (-pi, pi]."""
    a = math.fmod(theta + math.pi, TWO_PI)
    if a <= 0.0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class Landmark:
    category: str
    position: Point
    description: str


@dataclass(frozen=True)
class Scene:
    id: str
    bounds: Rect
    obstacles: tuple[Rect, ...] = ()
    landmarks: tuple[Landmark, ...] = ()
    step_size: float = DEFAULT_STEP
    turn_deg: float = DEFAULT_TURN_DEG

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"scene {self.id}: bounds must have positive area")
        for r in self.obstacles:
            if not (r[2] > r[0] and r[3] > r[1]):
                raise ValueError(f"scene {self.id}: obstacle {r} has no area")
            if r[0] < x0 or r[1] < y0 or r[2] > x1 or r[3] > y1:
                raise ValueError(f"scene {self.id}: obstacle {r} outside bounds")
        for lm in self.landmarks:
            if not self.in_bounds(lm.position):
                raise ValueError(f"scene {self.id}: landmark {lm.category} outside bounds")
            if self.in_obstacle(lm.position):
                raise ValueError(f"scene {self.id}: landmark {lm.category} inside obstacle")

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return math.hypot(x1 - x0, y1 - y0)

    @property
    def turn_angle(self) -> float:
        return math.radians(self.turn_deg)

    def in_bounds(self, p: Point) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1

    def in_obstacle(self, p: Point) -> bool:
        return any(r[0] <= p[0] <= r[2] and r[1] <= p[1] <= r[3] for r in self.obstacles)

    def is_free(self, p: Point) -> bool:
        return self.in_bounds(p) and not self.in_obstacle(p)

    def context_description(self) -> str:
        return " ".join(lm.description for lm in self.landmarks)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "bounds": list(self.bounds),
            "obstacles": [list(r) for r in self.obstacles],
            "landmarks": [
                {"category": lm.category, "position": list(lm.position), "description": lm.description}
                for lm in self.landmarks
            ],
        }
        if self.step_size != DEFAULT_STEP:
            d["step_size"] = self.step_size
        if self.turn_deg != DEFAULT_TURN_DEG:
            d["turn_deg"] = self.turn_deg
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            id=str(d["id"]),
            bounds=tuple(float(v) for v in d["bounds"]),
            obstacles=tuple(tuple(float(v) for v in r) for r in d.get("obstacles", ())),
            landmarks=tuple(
                Landmark(str(lm["category"]), tuple(float(v) for v in lm["position"]), str(lm.get("description", "")))
                for lm in d.get("landmarks", ())
            ),
            step_size=float(d.get("step_size", DEFAULT_STEP)),
            turn_deg=float(d.get("turn_deg", DEFAULT_TURN_DEG)),
        )


@dataclass(frozen=True)
class Pose:
    position: Point
    heading: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    def to_dict(self) -> dict:
        return {"position": list(self.position), "heading": self.heading}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(tuple(d["position"]), d["heading"])


@dataclass(frozen=True)
class Trajectory:
    points: tuple[Point, ...]

    def __post_init__(self) -> None:
        pts = tuple((float(p[0]), float(p[1])) for p in self.points)
        if not pts:
            raise ValueError("a trajectory needs at least one point")
        if not all(math.isfinite(c) for p in pts for c in p):
            raise ValueError("trajectory points must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def path_length(self) -> float:
        return sum(math.dist(a, b) for a, b in zip(self.points, self.points[1:]))

    @property
    def last(self) -> Point:
        return self.points[-1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)


@dataclass(frozen=True)
class Episode:
    id: str
    scene_id: str
    start: Pose
    instruction: str
    goal: Point
    reference_trajectory: Trajectory
    success_radius: float = 0.5
    task_kind: str = "navigation"
    ground_truth_answer: str | None = None

    def __post_init__(self) -> None:
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")
        if self.task_kind not in ("navigation", "question_answer"):
            raise ValueError(f"unknown task_kind {self.task_kind!r}")
        if self.task_kind == "question_answer" and not (self.ground_truth_answer or "").strip():
            raise ValueError("question_answer episodes need a ground_truth_answer")
        ref = self.reference_trajectory.points
        if math.dist(ref[0], self.start.position) > self.success_radius:
            raise ValueError(f"episode {self.id}: reference does not start near the start pose")
        if math.dist(ref[-1], self.goal) > self.success_radius:
            raise ValueError(f"episode {self.id}: reference does not end near the goal")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scene_id": self.scene_id,
            "start": self.start.to_dict(),
            "instruction": self.instruction,
            "goal": list(self.goal),
            "reference_trajectory": [list(p) for p in self.reference_trajectory.points],
            "success_radius": self.success_radius,
            "task_kind": self.task_kind,
            "ground_truth_answer": self.ground_truth_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            id=str(d["id"]),
            scene_id=str(d["scene_id"]),
            start=Pose.from_dict(d["start"]),
            instruction=str(d["instruction"]),
            goal=tuple(float(v) for v in d["goal"]),
            reference_trajectory=Trajectory(tuple(tuple(p) for p in d["reference_trajectory"])),
            success_radius=float(d.get("success_radius", 0.5)),
            task_kind=str(d.get("task_kind", "navigation")),
            ground_truth_answer=d.get("ground_truth_answer"),
        )


@dataclass(frozen=True)
class ObservationVector:
    depth_rays: tuple[float, ...]
    goal_bearing: float
    goal_distance: float
    step_fraction: float

    @property
    def width(self) -> int:
        return len(self.depth_rays) + 3

    def as_array(self) -> np.ndarray:
        return np.array([*self.depth_rays, self.goal_bearing, self.goal_distance, self.step_fraction])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.as_array()]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "ObservationVector":
        values = [float(v) for v in values]
        if len(values) < 4:
            raise ValueError("observation vector too short")
        return cls(tuple(values[:-3]), values[-3], values[-2], values[-1])


@dataclass(frozen=True)
class StepResult:
    new_pose: Pose
    collided: bool
    terminated: bool


# --- collision geometry -----------------------------------------------------

def segment_hits_rect(p: Point, q: Point, rect: Rect) -> bool:
    """Closed segment vs closed rectangle (Liang-Barsky clipping)."""
    x0, y0, x1, y1 = rect
    dx, dy = q[0] - p[0], q[1] - p[1]
    t_lo, t_hi = 0.0, 1.0
    for d, lo, hi, s in ((dx, x0, x1, p[0]), (dy, y0, y1, p[1])):
        if d == 0.0:
            if s < lo or s > hi:
                return False
            continue
        ta, tb = (lo - s) / d, (hi - s) / d
        if ta > tb:
            ta, tb = tb, ta
        t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
        if t_lo > t_hi:
            return False
    return True


def segment_blocked(scene: Scene, p: Point, q: Point) -> bool:
    if not scene.in_bounds(q) or not scene.in_bounds(p):
        return True
    return any(segment_hits_rect(p, q, r) for r in scene.obstacles)


def step(pose: Pose, action: Action | str, scene: Scene) -> StepResult:
    action = Action(action)
    if action is Action.STOP:
        return StepResult(pose, False, True)
    if action is Action.TURN_LEFT:
        return StepResult(Pose(pose.position, pose.heading + scene.turn_angle), False, False)
    if action is Action.TURN_RIGHT:
        return StepResult(Pose(pose.position, pose.heading - scene.turn_angle), False, False)
    x, y = pose.position
    q = (x + scene.step_size * math.cos(pose.heading), y + scene.step_size * math.sin(pose.heading))
    if segment_blocked(scene, pose.position, q):
        return StepResult(pose, True, False)
    return StepResult(Pose(q, pose.heading), False, False)


# --- observation ------------------------------------------------------------

def ray_angles(n_rays: int = DEFAULT_RAYS) -> np.ndarray:
    # half-open [-pi/2, pi/2): ray n_rays // 2 points straight ahead
    return -0.5 * math.pi + np.arange(n_rays) * (math.pi / n_rays)


def cast_rays(scene: Scene, origin: Point, directions: np.ndarray) -> np.ndarray:
    """Distance from origin along each unit direction (shape (R, 2)) to the
    first obstacle face or boundary."""
    ox, oy = origin
    ux, uy = directions[:, 0], directions[:, 1]
    x0, y0, x1, y1 = scene.bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(ux > 0, (x1 - ox) / ux, np.where(ux < 0, (x0 - ox) / ux, np.inf))
        ty = np.where(uy > 0, (y1 - oy) / uy, np.where(uy < 0, (y0 - oy) / uy, np.inf))
    dist = np.maximum(np.minimum(tx, ty), 0.0)
    if scene.obstacles:
        rects = np.asarray(scene.obstacles, dtype=float)
        rx0, ry0, rx1, ry1 = (rects[:, i][None, :] for i in range(4))
        uxc, uyc = ux[:, None], uy[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ax, bx = (rx0 - ox) / uxc, (rx1 - ox) / uxc
            ay, by = (ry0 - oy) / uyc, (ry1 - oy) / uyc
        inside_x = (rx0 <= ox) & (ox <= rx1)
        inside_y = (ry0 <= oy) & (oy <= ry1)
        zx, zy = uxc == 0, uyc == 0
        lo_x = np.where(zx, np.where(inside_x, -np.inf, np.inf), np.minimum(ax, bx))
        hi_x = np.where(zx, np.where(inside_x, np.inf, -np.inf), np.maximum(ax, bx))
        lo_y = np.where(zy, np.where(inside_y, -np.inf, np.inf), np.minimum(ay, by))
        hi_y = np.where(zy, np.where(inside_y, np.inf, -np.inf), np.maximum(ay, by))
        t_enter = np.maximum(lo_x, lo_y)
        t_exit = np.minimum(hi_x, hi_y)
        hit = (t_exit >= np.maximum(t_enter, 0.0)) & np.isfinite(t_exit)
        t_hit = np.where(hit, np.maximum(t_enter, 0.0), np.inf)
        dist = np.minimum(dist, t_hit.min(axis=1))
    return dist


def observe(
    pose: Pose,
    scene: Scene,
    goal: Point,
    step_index: int,
    budget: int,
    n_rays: int = DEFAULT_RAYS,
    max_range: float | None = None,
) -> ObservationVector:
    max_range = scene.diagonal if max_range is None else max_range
    angles = pose.heading + ray_angles(n_rays)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    depth = np.minimum(cast_rays(scene, pose.position, dirs), max_range)
    dx, dy = goal[0] - pose.position[0], goal[1] - pose.position[1]
    bearing = wrap_pi(math.atan2(dy, dx) - pose.heading) if (dx or dy) else 0.0
    frac = min(max(step_index / budget, 0.0), 1.0) if budget > 0 else 1.0
    return ObservationVector(tuple(float(d) for d in depth), bearing, math.hypot(dx, dy), frac)


# --- geodesics --------------------------------------------------------------

@dataclass(frozen=True)
class _Grid:
    origin: Point
    cell: float
    nx: int
    ny: int
    blocked: np.ndarray = field(repr=False)

    def index(self, p: Point) -> tuple[int, int]:
        i = min(max(int((p[0] - self.origin[0]) / self.cell), 0), self.nx - 1)
        j = min(max(int((p[1] - self.origin[1]) / self.cell), 0), self.ny - 1)
        return i, j

    def center(self, i: int, j: int) -> Point:
        return (self.origin[0] + (i + 0.5) * self.cell, self.origin[1] + (j + 0.5) * self.cell)


@lru_cache(maxsize=64)
def _grid(scene: Scene, cell: float) -> _Grid:
    x0, y0, x1, y1 = scene.bounds
    nx, ny = max(int(math.ceil((x1 - x0) / cell - 1e-9)), 1), max(int(math.ceil((y1 - y0) / cell - 1e-9)), 1)
    cx = x0 + (np.arange(nx) + 0.5) * cell
    cy = y0 + (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    blocked = np.zeros((nx, ny), dtype=bool)
    for r in scene.obstacles:
        blocked |= (gx >= r[0]) & (gx <= r[2]) & (gy >= r[1]) & (gy <= r[3])
    blocked |= (gx > x1) | (gy > y1)
    return _Grid((x0, y0), cell, nx, ny, blocked)


_MOVES = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
          (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)), (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2))]


def _astar(grid: _Grid, start: tuple[int, int], goal: tuple[int, int]) -> float:
    """Length in cells of the cheapest 8-connected route; diagonals may not cut corners."""
    blocked = grid.blocked.copy()
    # endpoints hugging an obstacle face may snap onto a blocked cell
    blocked[start] = blocked[goal] = False
    nx, ny = grid.nx, grid.ny
    gi, gj = goal

    def h(i: int, j: int) -> float:
        dx, dy = abs(i - gi), abs(j - gj)
        return max(dx, dy) + (math.sqrt(2) - 1.0) * min(dx, dy)

    best = {start: 0.0}
    heap = [(h(*start), 0.0, start)]
    closed = set()
    while heap:
        _, g, node = heapq.heappop(heap)
        if node == goal:
            return g
        if node in closed:
            continue
        closed.add(node)
        i, j = node
        for di, dj, cost in _MOVES:
            a, b = i + di, j + dj
            if not (0 <= a < nx and 0 <= b < ny) or blocked[a, b]:
                continue
            if di and dj and (blocked[i + di, j] or blocked[i, j + dj]):
                continue
            ng = g + cost
            if ng < best.get((a, b), math.inf):
                best[(a, b)] = ng
                heapq.heappush(heap, (ng + h(a, b), ng, (a, b)))
    raise NoPathError(f"no grid route from {start} to {goal}")


@lru_cache(maxsize=4096)
def shortest_path_length(scene: Scene, a: Point, b: Point, cell: float = GRID_CELL) -> float:
    a = (float(a[0]), float(a[1]))
    b = (float(b[0]), float(b[1]))
    if a == b:
        return 0.0
    if not segment_blocked(scene, a, b):
        return math.dist(a, b)
    grid = _grid(scene, cell)
    sa, sb = grid.index(a), grid.index(b)
    cells = _astar(grid, sa, sb)
    return math.dist(a, grid.center(*sa)) + cells * cell + math.dist(grid.center(*sb), b)


# --- episode stepping -------------------------------------------------------

class EpisodeSim:
    """Mutable stepping state for one episode: pose, step counter and the
    executed trajectory.  Ends on STOP, budget exhaustion or (optionally)
    arrival within the success radius."""

    def __init__(self, episode: Episode, scene: Scene, budget: int, stop_on_arrival: bool = True,
                 n_rays: int = DEFAULT_RAYS):
        if budget < 1:
            raise ValueError("budget must be at least 1")
        self.episode = episode
        self.scene = scene
        self.budget = budget
        self.stop_on_arrival = stop_on_arrival
        self.n_rays = n_rays
        self.pose = episode.start
        self.step_index = 0
        self.positions: list[Point] = [episode.start.position]
        self.actions: list[Action] = []
        self.collisions = 0
        self.stopped = False
        self.arrived = False

    @property
    def done(self) -> bool:
        return self.stopped or self.arrived or self.step_index >= self.budget

    def observation(self) -> ObservationVector:
        return observe(self.pose, self.scene, self.episode.goal, self.step_index, self.budget, self.n_rays)

    def apply(self, action: Action | str) -> StepResult:
        if self.done:
            raise RuntimeError("episode already finished")
        action = Action(action)
        res = step(self.pose, action, self.scene)
        self.pose = res.new_pose
        self.step_index += 1
        self.actions.append(action)
        self.positions.append(self.pose.position)
        self.collisions += res.collided
        if action is Action.STOP:
            self.stopped = True
        elif self.stop_on_arrival and math.dist(self.pose.position, self.episode.goal) < self.episode.success_radius:
            self.arrived = True
        exhausted = self.step_index >= self.budget
        return StepResult(res.new_pose, res.collided, res.terminated or exhausted)

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(self.positions))


def reference_actions(episode: Episode, scene: Scene) -> list[Action]:
    """Recover the action sequence that reproduces the reference trajectory
    from the start pose, ending with STOP."""
    pts = episode.reference_trajectory.points
    pose = episode.start
    out: list[Action] = []
    for target in pts[1:]:
        if math.dist(target, pose.position) < 1e-12:
            continue
        want = math.atan2(target[1] - pose.position[1], target[0] - pose.position[0])
        diff = wrap_pi(want - pose.heading)
        n_turns = int(round(abs(diff) / scene.turn_angle))
        turn = Action.TURN_LEFT if diff > 0 else Action.TURN_RIGHT
        for _ in range(n_turns):
            pose = step(pose, turn, scene).new_pose
            out.append(turn)
        res = step(pose, Action.FORWARD, scene)
        if res.collided or math.dist(res.new_pose.position, target) > 1e-6:
            raise ValueError(f"episode {episode.id}: reference point {target} is not reachable by one forward step")
        pose = res.new_pose
        out.append(Action.FORWARD)
    out.append(Action.STOP)
    return out


# --- files ------------------------------------------------------------------

def load_scene(path: str | Path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return Scene.from_dict(json.load(fh))


def save_scene(scene: Scene, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.to_dict(), fh, indent=2)
        fh.write("\n")


def load_scenes(directory: str | Path) -> dict[str, Scene]:
    scenes = [load_scene(p) for p in sorted(Path(directory).glob("*.json"))]
    return {s.id: s for s in scenes}


def load_episodes(path: str | Path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return [Episode.from_dict(json.loads(line)) for line in fh if line.strip()]


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict()) + "\n")
