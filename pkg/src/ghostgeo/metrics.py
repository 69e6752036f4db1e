"""Trajectory metrics: TL, NE, SR, OSR, SPL, nDTW, SDTW.

Trajectories are sequences of (x, y) in metres. Summaries are plain
unweighted means over episodes, with SR and OSR reported in percent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ghostgeo.errors import DomainError, StructuralError

D_TH = 3.0
COLUMNS = ("tl", "ne", "osr", "sr", "spl", "ndtw", "sdtw")
HEADERS = ("TL", "NE", "OSR", "SR", "SPL", "nDTW", "SDTW")


def as_trajectory(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2 or len(arr) == 0:
        raise StructuralError(f"trajectory must be a non-empty (N, 2) sequence, got shape {arr.shape}")
    arr = arr[:, :2]
    if not np.all(np.isfinite(arr)):
        raise DomainError("trajectory has non-finite coordinates")
    return arr


def trajectory_length(t) -> float:
    t = as_trajectory(t)
    return float(np.sum(np.hypot(*np.diff(t, axis=0).T)))


def nav_error(t, goal) -> float:
    t = as_trajectory(t)
    return math.hypot(t[-1, 0] - goal[0], t[-1, 1] - goal[1])


def success(ne: float, d_th: float = D_TH) -> int:
    return int(ne <= d_th)


def oracle_success(t, goal, d_th: float = D_TH) -> int:
    t = as_trajectory(t)
    return int(np.min(np.hypot(t[:, 0] - goal[0], t[:, 1] - goal[1])) <= d_th)


def spl(sr: float, l_star: float, tl: float) -> float:
    if not l_star > 0:
        raise DomainError(f"shortest-path length must be positive, got {l_star}")
    return sr * l_star / max(l_star, tl)


def dtw(p, r) -> float:
    """Boundary-matched DTW with Euclidean point cost and unit steps."""
    p, r = as_trajectory(p), as_trajectory(r)
    cost = np.hypot(p[:, None, 0] - r[None, :, 0], p[:, None, 1] - r[None, :, 1])
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j], acc[i, j - 1], acc[i - 1, j - 1])
    return float(acc[n, m])


def ndtw(p, r, d_th: float = D_TH) -> float:
    r = as_trajectory(r)
    return math.exp(-dtw(p, r) / (len(r) * d_th))


def sdtw(sr: float, ndtw_value: float) -> float:
    return sr * ndtw_value


@dataclass
class EpisodeResult:
    id: str
    tl: float
    ne: float
    sr: int
    osr: int
    spl: float
    ndtw: float
    sdtw: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def score_episode(episode_id: str, predicted, reference, goal, l_star: float, d_th: float = D_TH) -> EpisodeResult:
    tl = trajectory_length(predicted)
    ne = nav_error(predicted, goal)
    sr = success(ne, d_th)
    osr = oracle_success(predicted, goal, d_th)
    nd = ndtw(predicted, reference, d_th)
    return EpisodeResult(episode_id, tl, ne, sr, osr, spl(sr, l_star, tl), nd, sdtw(sr, nd))


@dataclass
class Summary:
    n: int
    tl: float
    ne: float
    osr: float  # percent
    sr: float  # percent
    spl: float
    ndtw: float
    sdtw: float

    def row(self) -> list[float]:
        return [getattr(self, c) for c in COLUMNS]


def aggregate(results) -> Summary:
    results = list(results)
    if not results:
        raise DomainError("cannot aggregate zero episodes")
    mean = {c: float(np.mean([getattr(r, c) for r in results])) for c in COLUMNS}
    mean["sr"] *= 100.0
    mean["osr"] *= 100.0
    return Summary(n=len(results), **mean)


def write_jsonl(results, path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(r.to_json() + "\n")


def read_jsonl(path) -> list[EpisodeResult]:
    with open(path) as fh:
        return [EpisodeResult(**json.loads(line)) for line in fh if line.strip()]


def format_table(rows: dict[str, Summary]) -> str:
    """Aligned text table, one row per labelled summary (unweighted means)."""
    label_w = max([len("config")] + [len(k) for k in rows])
    head = "config".ljust(label_w) + "".join(h.rjust(9) for h in HEADERS)
    lines = [head, "-" * len(head)]
    for name, s in rows.items():
        lines.append(name.ljust(label_w) + "".join(f"{v:9.3f}" for v in s.row()))
    return "\n".join(lines)
