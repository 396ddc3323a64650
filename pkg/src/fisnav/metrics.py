"""Navigation metrics (NE, SR, OS, SPL, nDTW) and trajectory distances."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Episode, Point, Scene, Trajectory, shortest_path_length

TABLE_COLUMNS = ("NE", "OS", "SR", "SPL", "nDTW")


def _pairwise(a: Trajectory, b: Trajectory) -> np.ndarray:
    pa, pb = a.as_array(), b.as_array()
    return np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))


def navigation_error(final: Point, goal: Point) -> float:
    return math.dist(final, goal)


def success_and_oracle(traj: Trajectory, goal: Point, radius: float) -> tuple[int, int]:
    if radius <= 0:
        raise ValueError("radius must be positive")
    sr = int(math.dist(traj.last, goal) < radius)
    os_ = int(min(math.dist(p, goal) for p in traj.points) < radius)
    return sr, os_


def spl(sr: int, shortest: float, actual: float) -> float:
    longest = max(shortest, actual)
    if longest == 0.0:
        return float(sr)
    return sr * shortest / longest


def dtw(a: Trajectory, b: Trajectory) -> float:
    cost = _pairwise(a, b)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


def ndtw(pred: Trajectory, ref: Trajectory, d_th: float) -> float:
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    return math.exp(-dtw(pred, ref) / (len(ref) * d_th))


def discrete_frechet(a: Trajectory, b: Trajectory) -> float:
    d = _pairwise(a, b).tolist()
    n, m = len(d), len(d[0])
    ca = [[0.0] * m for _ in range(n)]
    for i in range(n):
        di, ci = d[i], ca[i]
        cp = ca[i - 1] if i else None
        for j in range(m):
            if i == 0 and j == 0:
                best = 0.0
            elif i == 0:
                best = ci[j - 1]
            elif j == 0:
                best = cp[0]
            else:
                best = min(cp[j], cp[j - 1], ci[j - 1])
            ci[j] = di[j] if di[j] > best else best
    return float(ca[-1][-1])


@dataclass(frozen=True)
class MetricReport:
    ne: float
    sr: int
    os: int
    spl: float
    ndtw: float


def evaluate_trajectory(traj: Trajectory, episode: Episode, scene: Scene, d_th: float | None = None) -> MetricReport:
    goal = episode.goal
    sr, os_ = success_and_oracle(traj, goal, episode.success_radius)
    shortest = shortest_path_length(scene, episode.start.position, goal)
    return MetricReport(
        ne=navigation_error(traj.last, goal),
        sr=sr,
        os=os_,
        spl=spl(sr, shortest, traj.path_length),
        ndtw=ndtw(traj, episode.reference_trajectory, d_th or episode.success_radius),
    )


def aggregate(reports: Sequence[MetricReport]) -> dict[str, float]:
    if not reports:
        raise ValueError("nothing to aggregate")
    n = len(reports)
    return {
        "NE": sum(r.ne for r in reports) / n,
        "OS": sum(r.os for r in reports) / n,
        "SR": sum(r.sr for r in reports) / n,
        "SPL": sum(r.spl for r in reports) / n,
        "nDTW": sum(r.ndtw for r in reports) / n,
    }


def format_table(rows: Iterable[tuple[str, dict[str, float]]], columns: Sequence[str] = TABLE_COLUMNS,
                 label: str = "Method") -> str:
    """Plain-text table; rates are shown as percentages, NE in meters."""
    rows = list(rows)
    head = [label, *columns]
    body = []
    for name, vals in rows:
        cells = [name]
        for c in columns:
            v = vals[c]
            cells.append(f"{v:.2f}" if c == "NE" else f"{100.0 * v:.1f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
    rule = "-" * len(fmt(head))
    return "\n".join([fmt(head), rule, *map(fmt, body)]) + "\n"


def report_lines(items: Iterable[tuple[str, MetricReport]]) -> Iterable[str]:
    for episode_id, rep in items:
        yield json.dumps({"episode_id": episode_id, **asdict(rep)})
