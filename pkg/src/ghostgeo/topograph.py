"""Evolving topological graph with current / visited / ghost nodes.

Ghost features are stored as a frozen ``base_feature`` plus an optional
transient ``enhancement``; the effective feature is their sum. Moving to a
ghost drops every enhancement in the graph, so enhanced nodes only ever
exist between a pipeline step and the next move.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from ghostgeo.errors import DomainError, InvariantViolation, ScopeViolation, ShapeError

GHOST_MERGE_RADIUS = 0.05


class NodeKind(str, enum.Enum):
    CURRENT = "current"
    VISITED = "visited"
    GHOST = "ghost"


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def dist(self, other: Pose) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(eq=False)
class TopoNode:
    id: int
    kind: NodeKind
    pose: Pose
    base_feature: np.ndarray
    enhancement: np.ndarray | None = None


_graph_ids = itertools.count()


class TopoGraph:
    """Single-writer graph. Node ids are monotonic and never reused."""

    def __init__(self, start_pose: Pose, start_feature: np.ndarray):
        self.graph_id = next(_graph_ids)
        self.nodes: dict[int, TopoNode] = {}
        self.adj: dict[int, dict[int, float]] = {}
        self.step_counter = 0
        self._next_id = 0
        self.d_model = len(start_feature)
        self.current_id = self._new_node(NodeKind.CURRENT, start_pose, start_feature)

    def _new_node(self, kind: NodeKind, pose: Pose, feature) -> int:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.d_model,):
            raise ShapeError(f"node feature shape {feature.shape}, expected ({self.d_model},)")
        nid = self._next_id
        self._next_id += 1
        self.nodes[nid] = TopoNode(nid, kind, pose, feature)
        self.adj[nid] = {}
        return nid

    def _connect(self, a: int, b: int) -> None:
        length = self.nodes[a].pose.dist(self.nodes[b].pose)
        self.adj[a][b] = length
        self.adj[b][a] = length

    def __len__(self) -> int:
        return len(self.nodes)

    node_count = __len__

    @property
    def current(self) -> TopoNode:
        return self.nodes[self.current_id]

    def node(self, nid: int) -> TopoNode:
        try:
            return self.nodes[nid]
        except KeyError:
            raise KeyError(f"unknown node id {nid}") from None

    def edges(self) -> list[tuple[int, int, float]]:
        return [(a, b, length) for a, nbrs in self.adj.items() for b, length in nbrs.items() if a < b]

    def neighbors(self, nid: int) -> list[int]:
        return sorted(self.adj[nid])

    def frontier(self) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if n.kind is NodeKind.GHOST)

    def local_ghosts(self) -> list[int]:
        """Ghosts adjacent to the current node (the enhancement spotlight)."""
        return [nid for nid in self.neighbors(self.current_id) if self.nodes[nid].kind is NodeKind.GHOST]

    def enhanced(self) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if n.enhancement is not None)

    def add_ghosts(self, candidates) -> list[int]:
        """Attach one ghost per ``(pose, base_feature)`` candidate to the current node.

        A candidate within ``GHOST_MERGE_RADIUS`` of an existing ghost reuses
        that ghost (and gains an edge to the current node if missing).
        Returns the ghost id for every candidate, in order.
        """
        ids = []
        for pose, feature in candidates:
            existing = self._ghost_near(pose)
            if existing is None:
                existing = self._new_node(NodeKind.GHOST, pose, feature)
            if existing not in self.adj[self.current_id]:
                self._connect(self.current_id, existing)
            ids.append(existing)
        return ids

    def _ghost_near(self, pose: Pose) -> int | None:
        best, best_d = None, GHOST_MERGE_RADIUS
        for nid in self.frontier():
            d = self.nodes[nid].pose.dist(pose)
            if d <= best_d:
                best, best_d = nid, d
        return best

    def enhance_local(self, features: dict[int, np.ndarray]) -> None:
        """Store enhancements on ghosts adjacent to the current node.

        All keys are validated before anything is written.
        """
        self._validate_enhancements(features, local_only=True)
        for nid, vec in features.items():
            self.nodes[nid].enhancement = np.array(vec, dtype=np.float64)

    def enhance_global(self, features: dict[int, np.ndarray]) -> None:
        """Ablation-only bypass: enhance any ghost, adjacent or not."""
        self._validate_enhancements(features, local_only=False)
        for nid, vec in features.items():
            self.nodes[nid].enhancement = np.array(vec, dtype=np.float64)

    def _validate_enhancements(self, features: dict[int, np.ndarray], local_only: bool) -> None:
        local = set(self.local_ghosts())
        for nid, vec in features.items():
            node = self.node(nid)
            if node.kind is not NodeKind.GHOST:
                raise ScopeViolation(f"node {nid} is {node.kind.value}, only ghosts can be enhanced")
            if local_only and nid not in local:
                raise ScopeViolation(f"ghost {nid} is not adjacent to the current node {self.current_id}")
            if np.shape(vec) != (self.d_model,):
                raise ShapeError(f"enhancement for {nid} has shape {np.shape(vec)}, expected ({self.d_model},)")

    def select_and_move(self, target: int) -> None:
        """Promote ``target`` to current; the old current becomes visited.

        Every enhancement in the graph is discarded, on the promoted node and
        on the bypassed frontier alike.
        """
        node = self.node(target)
        if node.kind is not NodeKind.GHOST:
            raise DomainError(f"node {target} is {node.kind.value}, can only move to a ghost")
        self.nodes[self.current_id].kind = NodeKind.VISITED
        node.kind = NodeKind.CURRENT
        self.current_id = target
        for n in self.nodes.values():
            n.enhancement = None
        self.step_counter += 1

    def effective_feature(self, nid: int) -> np.ndarray:
        node = self.node(nid)
        if node.enhancement is None:
            return node.base_feature.copy()
        return node.base_feature + node.enhancement

    def check_invariants(self, local_scope: bool = True) -> None:
        """Raise :class:`InvariantViolation` if the graph is inconsistent."""
        currents = [nid for nid, n in self.nodes.items() if n.kind is NodeKind.CURRENT]
        if currents != [self.current_id]:
            raise InvariantViolation(f"expected exactly one current node, found {currents}")
        for nid, n in self.nodes.items():
            if n.enhancement is not None and n.kind is not NodeKind.GHOST:
                raise InvariantViolation(f"{n.kind.value} node {nid} carries an enhancement")
            if n.kind is NodeKind.GHOST and not self.adj[nid]:
                raise InvariantViolation(f"ghost {nid} has no edges")
            for m, length in self.adj[nid].items():
                if self.adj[m].get(nid) != length:
                    raise InvariantViolation(f"edge {nid}-{m} is not symmetric")
                if abs(length - n.pose.dist(self.nodes[m].pose)) > 1e-6:
                    raise InvariantViolation(f"edge {nid}-{m} length disagrees with node poses")
        if local_scope:
            stray = set(self.enhanced()) - set(self.local_ghosts())
            if stray:
                raise InvariantViolation(f"enhanced ghosts outside the local spotlight: {sorted(stray)}")

    def snapshot(self, full: bool = False) -> dict:
        nodes = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            entry = {
                "id": nid,
                "kind": n.kind.value,
                "pose": [n.pose.x, n.pose.y, n.pose.theta],
                "has_enhancement": n.enhancement is not None,
            }
            if full:
                entry["base_feature"] = n.base_feature.tolist()
                entry["enhancement"] = None if n.enhancement is None else n.enhancement.tolist()
            nodes.append(entry)
        return {
            "step": self.step_counter,
            "nodes": nodes,
            "edges": [[a, b, length] for a, b, length in sorted(self.edges())],
        }

    def to_json(self, full: bool = False) -> str:
        return json.dumps(self.snapshot(full))


def init(start_pose: Pose, start_feature: np.ndarray) -> TopoGraph:
    return TopoGraph(start_pose, start_feature)
