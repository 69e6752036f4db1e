"""Episode rollout with scripted high-level policies."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from ghostgeo.encoder import EncoderParams
from ghostgeo.errors import DomainError, InvariantViolation
from ghostgeo.harness.config import PipelineConfig, Scope
from ghostgeo.harness.pipeline import start_feature, step_pipeline
from ghostgeo.metrics import D_TH, EpisodeResult, score_episode
from ghostgeo.synthscene import Scene, geodesic, occupancy, resample_polyline, shortest_path
from ghostgeo.topograph import Pose, TopoGraph

STEP_M = 0.25
GREEDY_BONUS = 1.0
GRID_RES = 0.1


class Policy(str, enum.Enum):
    GREEDY = "greedy"
    RANDOM = "random"
    SCRIPTED = "scripted"


@dataclass
class EpisodeOutcome:
    trajectory: list[tuple[float, float]]
    result: EpisodeResult
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    stuck: bool = False


def greedy_score(graph: TopoGraph, nid: int, goal) -> float:
    """Closer to goal is better, plus a bonus for strong geometric enhancement (plumbing)."""
    node = graph.nodes[nid]
    score = -math.hypot(node.pose.x - goal[0], node.pose.y - goal[1])
    if node.enhancement is not None:
        score += GREEDY_BONUS * float(np.mean(np.abs(node.enhancement)))
    return score


def _reference_target(reference, here, reach: float):
    """Farthest reference point (by index) within ``reach`` of ``here``; the goal if none."""
    best = None
    for i, p in enumerate(reference):
        if math.dist(p, here) <= reach:
            best = i
    return reference[-1] if best is None else reference[best]


def select_ghost(graph: TopoGraph, policy: Policy, goal, rng, reference=None, reach: float = 3.0) -> int:
    frontier = graph.frontier()
    if policy is Policy.RANDOM:
        return int(frontier[int(rng.integers(len(frontier)))])
    if policy is Policy.SCRIPTED:
        target = _reference_target(reference, graph.current.pose.xy(), reach + 0.5)
        return min(frontier, key=lambda nid: (math.dist(graph.nodes[nid].pose.xy(), target), nid))
    return max(frontier, key=lambda nid: (greedy_score(graph, nid, goal), -nid))


def graph_route(graph: TopoGraph, target: int) -> list[int]:
    """Node ids on the shortest graph path from the current node to ``target``."""
    g = nx.Graph()
    for a, b, length in graph.edges():
        g.add_edge(a, b, weight=length)
    return nx.shortest_path(g, graph.current_id, target, weight="weight")


def densify(points, step: float = STEP_M) -> list[tuple[float, float]]:
    return resample_polyline(points, step)


def run_episode(
    scene: Scene,
    start: Pose,
    goal,
    policy: Policy | str,
    params: EncoderParams,
    cfg: PipelineConfig,
    max_steps: int = 30,
    seed: int = 0,
    reference=None,
    episode_id: str = "episode",
    d_th: float = D_TH,
) -> EpisodeOutcome:
    """Perceive, pick a ghost, move; repeat until near the goal, stuck, or out of steps.

    The stop rule fires as soon as the current node is within ``d_th`` of
    the goal (including at the start). Stuck episodes score SR = 0.
    """
    policy = Policy(policy)
    goal = (float(goal[0]), float(goal[1]))
    grid = occupancy(scene, GRID_RES)
    l_star, path = shortest_path(grid, start.xy(), goal)
    if not math.isfinite(l_star):
        raise DomainError(f"goal {goal} unreachable from {start.xy()}")
    if l_star == 0:
        raise DomainError("start and goal share a grid cell; shortest path length must be positive")
    if reference is None:
        reference = resample_polyline([start.xy()] + path[1:-1] + [goal], STEP_M)
    rng = np.random.default_rng(seed)
    memo: dict[int, np.ndarray] = {}

    graph = TopoGraph(start, start_feature(scene, start, cfg))
    waypoints = [start.xy()]
    log = [{"event": "init", **graph.snapshot()}]
    steps = 0
    stuck = False
    local = cfg.scope is Scope.LOCAL

    def near_goal() -> bool:
        return math.dist(graph.current.pose.xy(), goal) <= d_th

    while steps < max_steps and not near_goal():
        step_pipeline(graph, scene, graph.current.pose, params, cfg, memo)
        graph.check_invariants(local_scope=local)
        nonlocal_enh = sorted(set(graph.enhanced()) - set(graph.local_ghosts()))
        log.append({"event": "perceive", "enhanced": graph.enhanced(), "nonlocal": nonlocal_enh, **graph.snapshot()})
        if not graph.frontier():
            stuck = True
            break
        target = select_ghost(graph, policy, goal, rng, reference, cfg.d_max)
        route = graph_route(graph, target)
        graph.select_and_move(target)
        if graph.enhanced():
            raise InvariantViolation("enhancements survived a move")
        graph.check_invariants(local_scope=local)
        waypoints.extend(graph.nodes[n].pose.xy() for n in route[1:])
        steps += 1
        log.append({"event": "move", "target": target, "route": route, "step": graph.step_counter})

    trajectory = densify(waypoints)
    result = score_episode(episode_id, trajectory, reference, goal, l_star, d_th)
    if stuck:
        # can only happen away from the goal, so SR is already 0; kept explicit
        result.sr, result.spl, result.sdtw = 0, 0.0, 0.0
    return EpisodeOutcome(trajectory, result, log, steps, stuck)


def geodesic_length(scene: Scene, a, b) -> float:
    return geodesic(occupancy(scene, GRID_RES), a, b)
