"""Synthetic box-world scenes: depth rendering, candidate proposal, geodesics.

World frame is z-up; headings are counter-clockwise from +x. A camera at
heading ``psi`` looks along ``(cos psi, sin psi, 0)``, its image x axis
points to ``(sin psi, -cos psi, 0)`` and image y points down. Rays are
parametrised so their forward component is 1, which makes the ray
parameter at a hit equal to the stored z-depth.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ghostgeo.errors import DegeneratePoseError, DomainError, StructuralError
from ghostgeo.geometry import DEFAULT_INTRINSICS, CameraIntrinsics, DepthMap
from ghostgeo.topograph import Pose

CAMERA_HEIGHT = 1.25
FAR_PLANE = 10.0
N_VIEWS = 12
VIEW_STEP = 2.0 * math.pi / N_VIEWS

# candidate proposal plumbing (not taken from any published predictor)
PATCH = 32
PATCH_PERCENTILE = 10.0
MIN_FREE_DEPTH = 0.5
WALL_MARGIN = 0.3
MIN_CLEARANCE = 0.2
SEGMENT_INFLATION = 0.2

HIT_NONE = -1
HIT_GROUND = -2


def wrap_angle(theta: float) -> float:
    """Normalise to [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise DomainError(f"degenerate box {self.lo} .. {self.hi}")

    def contains(self, p) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, p, self.hi))

    def footprint_distance(self, x: float, y: float) -> float:
        dx = max(self.lo[0] - x, 0.0, x - self.hi[0])
        dy = max(self.lo[1] - y, 0.0, y - self.hi[1])
        return math.hypot(dx, dy)

    def segment_hits_footprint(self, a, b, inflate: float = 0.0) -> bool:
        """2-D segment vs. footprint rectangle grown by ``inflate`` (slab test)."""
        lo = (self.lo[0] - inflate, self.lo[1] - inflate)
        hi = (self.hi[0] + inflate, self.hi[1] + inflate)
        t0, t1 = 0.0, 1.0
        for k in range(2):
            d = b[k] - a[k]
            if d == 0.0:
                if a[k] < lo[k] or a[k] > hi[k]:
                    return False
                continue
            s0, s1 = (lo[k] - a[k]) / d, (hi[k] - a[k]) / d
            if s0 > s1:
                s0, s1 = s1, s0
            t0, t1 = max(t0, s0), min(t1, s1)
            if t0 > t1:
                return False
        return True


@dataclass(frozen=True)
class Scene:
    boxes: tuple[Box, ...]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    ground_z: float = 0.0
    name: str = "scene"

    def __post_init__(self) -> None:
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise DomainError(f"empty scene bounds {self.bounds}")
        for b in self.boxes:
            if b.lo[0] < xmin or b.lo[1] < ymin or b.hi[0] > xmax or b.hi[1] > ymax:
                raise DomainError(f"box {b} leaves scene bounds {self.bounds}")

    def in_bounds(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def clearance(self, x: float, y: float) -> float:
        return min((b.footprint_distance(x, y) for b in self.boxes), default=math.inf)

    def to_dict(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "ground_z": self.ground_z,
            "boxes": [{"min": list(b.lo), "max": list(b.hi)} for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "scene") -> Scene:
        try:
            boxes = tuple(Box(tuple(map(float, b["min"])), tuple(map(float, b["max"]))) for b in data["boxes"])
            return cls(boxes, tuple(map(float, data["bounds"])), float(data.get("ground_z", 0.0)), name)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise StructuralError(f"malformed scene description: {exc}") from exc


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    return Scene.from_dict(json.loads(path.read_text()), name=path.stem)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


def _slab(origin: float, direction: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - origin) / direction
        b = (hi - origin) / direction
    t_in, t_out = np.minimum(a, b), np.maximum(a, b)
    parallel = direction == 0.0
    if np.any(parallel):
        inside = lo <= origin <= hi
        t_in = np.where(parallel, -np.inf if inside else np.inf, t_in)
        t_out = np.where(parallel, np.inf if inside else -np.inf, t_out)
    return t_in, t_out


def render_view(
    scene: Scene,
    pose: Pose,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    view_heading_offset: float = 0.0,
    camera_height: float = CAMERA_HEIGHT,
    far: float = FAR_PLANE,
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view. Returns ``(z_depth, hit_id)``, both ``(H, W)``.

    ``hit_id`` is the box index, ``HIT_GROUND`` or ``HIT_NONE``; pixels
    with no hit or beyond ``far`` hold NaN depth.
    """
    cam = (pose.x, pose.y, scene.ground_z + camera_height)
    for b in scene.boxes:
        if b.contains(cam):
            raise DegeneratePoseError(f"camera at {cam} is inside box {b}")
    psi = pose.theta + view_heading_offset
    k = intrinsics
    a = (np.arange(k.width) - k.cx) / k.fx
    down = (np.arange(k.height) - k.cy) / k.fy
    c, s = math.cos(psi), math.sin(psi)
    dx = a * s + c  # per column
    dy = -a * c + s
    dz = -down  # per row

    depth = np.full((k.height, k.width), np.inf)
    hit = np.full((k.height, k.width), HIT_NONE, dtype=np.int32)

    with np.errstate(divide="ignore"):
        t_ground = np.where(down > 0, (cam[2] - scene.ground_z) / np.where(down > 0, down, 1.0), np.inf)
    ground_rows = np.isfinite(t_ground)
    depth[ground_rows] = t_ground[ground_rows, None]
    hit[ground_rows] = HIT_GROUND

    for idx, box in enumerate(scene.boxes):
        tx0, tx1 = _slab(cam[0], dx, box.lo[0], box.hi[0])
        ty0, ty1 = _slab(cam[1], dy, box.lo[1], box.hi[1])
        col_in, col_out = np.maximum(tx0, ty0), np.minimum(tx1, ty1)
        cols = np.nonzero(col_in <= col_out)[0]
        if len(cols) == 0:
            continue
        tz0, tz1 = _slab(cam[2], dz, box.lo[2], box.hi[2])
        rows = np.nonzero(tz0 <= tz1)[0]
        if len(rows) == 0:
            continue
        t_in = np.maximum(col_in[cols][None, :], tz0[rows][:, None])
        t_out = np.minimum(col_out[cols][None, :], tz1[rows][:, None])
        sub = depth[np.ix_(rows, cols)]
        closer = (t_in <= t_out) & (t_in > 0) & (t_in < sub)
        if closer.any():
            rr, cc = np.nonzero(closer)
            depth[rows[rr], cols[cc]] = t_in[rr, cc]
            hit[rows[rr], cols[cc]] = idx

    beyond = ~(depth <= far)
    depth[beyond] = np.nan
    hit[beyond] = HIT_NONE
    return depth, hit


def render_depth(
    scene: Scene,
    pose: Pose,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    view_heading_offset: float = 0.0,
    camera_height: float = CAMERA_HEIGHT,
    far: float = FAR_PLANE,
) -> DepthMap:
    depth, _ = render_view(scene, pose, intrinsics, view_heading_offset, camera_height, far)
    return DepthMap(intrinsics, depth)


def view_offsets() -> list[float]:
    return [k * VIEW_STEP for k in range(N_VIEWS)]


def panorama(scene: Scene, pose: Pose, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, **kw) -> list[DepthMap]:
    """Twelve views at 30 degree steps, view k facing ``pose.theta + k * 30deg``."""
    return [render_depth(scene, pose, intrinsics, off, **kw) for off in view_offsets()]


def central_patch(depth: DepthMap, size: int = PATCH, far: float = FAR_PLANE) -> np.ndarray:
    k = depth.intrinsics
    r0 = int(round(k.cy)) - size // 2
    c0 = int(round(k.cx)) - size // 2
    r0, c0 = max(r0, 0), max(c0, 0)
    patch = np.array(depth.values[r0 : r0 + size, c0 : c0 + size], dtype=np.float64)
    patch[~(np.isfinite(patch) & (patch > 0))] = far
    return patch


@dataclass(frozen=True)
class Candidate:
    pose: Pose
    view: int
    distance: float


def propose_candidates(
    views: list[DepthMap],
    pose: Pose,
    d_max: float,
    scene: Scene | None = None,
    far: float = FAR_PLANE,
) -> list[Candidate]:
    """Heuristic waypoint proposal, one candidate per sufficiently open view.

    Free depth ``zbar`` is the 10th percentile of the central 32x32 patch
    (invalid pixels count as the far plane). Views with ``zbar > 0.5`` emit
    a candidate ``min(zbar - 0.3, d_max)`` ahead. With a scene, candidates
    out of bounds, within 0.2 m of a box footprint, or whose straight path
    crosses a box footprint inflated by 0.2 m are dropped.
    """
    if len(views) != N_VIEWS:
        raise DomainError(f"expected {N_VIEWS} views, got {len(views)}")
    out = []
    for k, view in enumerate(views):
        zbar = float(np.percentile(central_patch(view, far=far), PATCH_PERCENTILE))
        if not zbar > MIN_FREE_DEPTH:
            continue
        dist = min(zbar - WALL_MARGIN, d_max)
        psi = pose.theta + k * VIEW_STEP
        cand = Pose(pose.x + dist * math.cos(psi), pose.y + dist * math.sin(psi), wrap_angle(psi))
        if scene is not None and not _candidate_ok(scene, pose, cand):
            continue
        out.append(Candidate(cand, k, dist))
    return out


def _candidate_ok(scene: Scene, start: Pose, cand: Pose) -> bool:
    if not scene.in_bounds(cand.x, cand.y):
        return False
    if scene.clearance(cand.x, cand.y) < MIN_CLEARANCE:
        return False
    a, b = start.xy(), cand.xy()
    return not any(box.segment_hits_footprint(a, b, SEGMENT_INFLATION) for box in scene.boxes)


@dataclass(eq=False)
class OccupancyGrid:
    resolution: float
    origin: tuple[float, float]
    blocked: np.ndarray  # (nx, ny) bool, indexed [i, j] for x, y

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.origin[0]) / self.resolution)), int(math.floor((y - self.origin[1]) / self.resolution)))

    def center(self, i: int, j: int) -> tuple[float, float]:
        r = self.resolution
        return (self.origin[0] + (i + 0.5) * r, self.origin[1] + (j + 0.5) * r)

    def inside(self, i: int, j: int) -> bool:
        return 0 <= i < self.blocked.shape[0] and 0 <= j < self.blocked.shape[1]

    def free(self, x: float, y: float) -> bool:
        i, j = self.cell_of(x, y)
        return self.inside(i, j) and not self.blocked[i, j]


def occupancy(scene: Scene, resolution: float = 0.1) -> OccupancyGrid:
    """Cell blocked iff its center lies inside some box footprint."""
    if not resolution > 0:
        raise DomainError(f"resolution must be positive, got {resolution}")
    xmin, ymin, xmax, ymax = scene.bounds
    nx = int(math.ceil((xmax - xmin) / resolution - 1e-9))
    ny = int(math.ceil((ymax - ymin) / resolution - 1e-9))
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution
    blocked = np.zeros((nx, ny), dtype=bool)
    for b in scene.boxes:
        blocked |= ((xs >= b.lo[0]) & (xs <= b.hi[0]))[:, None] & ((ys >= b.lo[1]) & (ys <= b.hi[1]))[None, :]
    return OccupancyGrid(resolution, (xmin, ymin), blocked)


_MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
_SQRT2 = math.sqrt(2.0)


def shortest_path(grid: OccupancyGrid, a, b) -> tuple[float, list[tuple[float, float]]]:
    """8-connected A* between the cells containing ``a`` and ``b``.

    Returns ``(length_m, cell_center_path)``; length is ``inf`` and the path
    empty when the cells are disconnected. Diagonal steps may not cut a
    blocked corner.
    """
    start, goal = grid.cell_of(*a), grid.cell_of(*b)
    for name, c in (("start", start), ("goal", goal)):
        if not grid.inside(*c) or grid.blocked[c]:
            raise DomainError(f"{name} {c} is outside the grid or blocked")
    if start == goal:
        return 0.0, [grid.center(*start)]

    def h(c):
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (max(dx, dy) - min(dx, dy)) + _SQRT2 * min(dx, dy)

    blocked = grid.blocked
    g_cost = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), 0.0, start)]
    closed = set()
    while heap:
        _, g, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            break
        closed.add(cur)
        ci, cj = cur
        for di, dj in _MOVES:
            ni, nj = ci + di, cj + dj
            if not grid.inside(ni, nj) or blocked[ni, nj]:
                continue
            if di and dj and (blocked[ci + di, cj] or blocked[ci, cj + dj]):
                continue
            ng = g + (_SQRT2 if di and dj else 1.0)
            nxt = (ni, nj)
            if ng < g_cost.get(nxt, math.inf):
                g_cost[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(heap, (ng + h(nxt), ng, nxt))
    if goal not in parent:
        return math.inf, []
    path = []
    c = goal
    while c is not None:
        path.append(grid.center(*c))
        c = parent[c]
    return g_cost[goal] * grid.resolution, path[::-1]


def geodesic(grid: OccupancyGrid, a, b) -> float:
    return shortest_path(grid, a, b)[0]


def resample_polyline(points, spacing: float) -> list[tuple[float, float]]:
    """Points every ``spacing`` metres along a polyline, endpoints kept."""
    pts = [tuple(map(float, p[:2])) for p in points]
    if len(pts) < 2:
        return pts
    out = [pts[0]]
    carry = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        seg = math.hypot(x1 - x0, y1 - y0)
        if seg == 0.0:
            continue
        t = spacing - carry
        while t < seg - 1e-12:
            out.append((x0 + (x1 - x0) * t / seg, y0 + (y1 - y0) * t / seg))
            t += spacing
        carry = seg - (t - spacing)
    if out[-1] != pts[-1]:
        out.append(pts[-1])
    return out


# ---------------------------------------------------------------- presets

WALL_T = 0.2
WALL_H = 2.5


@dataclass
class EpisodeSpec:
    scene: Scene
    start: Pose
    goal: tuple[float, float]
    reference: list[tuple[float, float]] = field(default_factory=list)


def _wall(x0, y0, x1, y1, h=WALL_H):
    return Box((min(x0, x1), min(y0, y1), 0.0), (max(x0, x1), max(y0, y1), h))


def _corridor(rng: np.random.Generator) -> tuple[list[Box], tuple, Pose, tuple]:
    w = rng.uniform(1.8, 2.4)
    length = rng.uniform(12.0, 16.0)
    hw = w / 2
    boxes = [
        _wall(-1.0, hw, length + 1.0, hw + WALL_T),
        _wall(-1.0, -hw - WALL_T, length + 1.0, -hw),
        _wall(-1.0 - WALL_T, -hw - WALL_T, -1.0, hw + WALL_T),
        _wall(length + 1.0, -hw - WALL_T, length + 1.0 + WALL_T, hw + WALL_T),
    ]
    bounds = (-1.5, -hw - 0.5, length + 1.5, hw + 0.5)
    return boxes, bounds, Pose(0.0, 0.0, 0.0), (length, 0.0)


def _t_junction(rng):
    w = rng.uniform(2.0, 2.6)
    hw = w / 2
    stem = rng.uniform(8.0, 11.0)
    arm = rng.uniform(6.0, 8.0)
    top = stem + hw
    boxes = [
        _wall(-hw - WALL_T, -1.0, -hw, stem - hw),  # stem left
        _wall(hw, -1.0, hw + WALL_T, stem - hw),  # stem right
        _wall(-hw - WALL_T, -1.0 - WALL_T, hw + WALL_T, -1.0),  # stem cap
        _wall(-arm - WALL_T, top, arm + WALL_T, top + WALL_T),  # far wall
        _wall(-arm, stem - hw - WALL_T, -hw, stem - hw),  # left arm bottom
        _wall(hw, stem - hw - WALL_T, arm, stem - hw),  # right arm bottom
        _wall(-arm - WALL_T, stem - hw - WALL_T, -arm, top + WALL_T),
        _wall(arm, stem - hw - WALL_T, arm + WALL_T, top + WALL_T),
    ]
    side = 1.0 if rng.random() < 0.5 else -1.0
    bounds = (-arm - 0.5, -1.5, arm + 0.5, top + 0.5)
    return boxes, bounds, Pose(0.0, 0.0, math.pi / 2), (side * (arm - 1.0), stem)


def _four_way(rng):
    w = rng.uniform(2.0, 2.6)
    hw = w / 2
    arm = rng.uniform(6.0, 8.0)
    boxes = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            boxes.append(_wall(sx * hw, sy * hw, sx * arm, sy * (hw + WALL_T)))
            boxes.append(_wall(sx * hw, sy * hw, sx * (hw + WALL_T), sy * arm))
    boxes += [
        _wall(-arm - WALL_T, -hw, -arm, hw),
        _wall(arm, -hw, arm + WALL_T, hw),
        _wall(-hw, -arm - WALL_T, hw, -arm),
        _wall(-hw, arm, hw, arm + WALL_T),
    ]
    goals = [(arm - 1.0, 0.0), (-arm + 1.0, 0.0), (0.0, arm - 1.0)]
    goal = goals[int(rng.integers(0, 3))]
    bounds = (-arm - 0.5, -arm - 0.5, arm + 0.5, arm + 0.5)
    return boxes, bounds, Pose(0.0, -arm + 1.0, math.pi / 2), goal


def _room_clutter(rng):
    size = rng.uniform(9.0, 11.0)
    boxes = [
        _wall(-WALL_T, -WALL_T, size + WALL_T, 0.0),
        _wall(-WALL_T, size, size + WALL_T, size + WALL_T),
        _wall(-WALL_T, 0.0, 0.0, size),
        _wall(size, 0.0, size + WALL_T, size),
    ]
    start, goal = (1.0, 1.0), (size - 1.0, size - 1.0)
    placed = 0
    while placed < 6:
        cx, cy = rng.uniform(1.5, size - 1.5, size=2)
        sx, sy = rng.uniform(0.4, 1.2, size=2)
        h = rng.uniform(0.4, 1.6)
        if math.hypot(cx - start[0], cy - start[1]) < 2.0 or math.hypot(cx - goal[0], cy - goal[1]) < 2.0:
            continue
        boxes.append(Box((cx - sx / 2, cy - sy / 2, 0.0), (cx + sx / 2, cy + sy / 2, h)))
        placed += 1
    bounds = (-0.5, -0.5, size + 0.5, size + 0.5)
    return boxes, bounds, Pose(start[0], start[1], math.pi / 4), goal


PRESETS = {
    "corridor": _corridor,
    "t_junction": _t_junction,
    "four_way": _four_way,
    "room_clutter": _room_clutter,
}


def make_preset(name: str, seed: int, resolution: float = 0.1, ref_spacing: float = 0.25) -> EpisodeSpec:
    """Seeded scene + start + goal + reference path (geodesic polyline)."""
    if name not in PRESETS:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    rng = np.random.default_rng([seed, list(PRESETS).index(name)])
    boxes, bounds, start, goal = PRESETS[name](rng)
    scene = Scene(tuple(boxes), bounds, 0.0, name=name)
    grid = occupancy(scene, resolution)
    _, path = shortest_path(grid, start.xy(), goal)
    reference = resample_polyline([start.xy()] + path[1:-1] + [goal], ref_spacing)
    return EpisodeSpec(scene, start, goal, reference)
