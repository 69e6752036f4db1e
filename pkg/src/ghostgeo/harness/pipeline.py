"""One planning-cycle step: panorama -> candidates -> ghosts -> geometric enhancement."""

from __future__ import annotations

import math

import numpy as np

from ghostgeo.encoder import GEOM_DIM, EncoderParams, GeomFeature, Mode, encode_batch, enhancement
from ghostgeo.errors import DomainError, ShapeError
from ghostgeo.geometry import DepthMap, FixedCloud, fix_size, project_depth, truncate_z
from ghostgeo.harness.config import PipelineConfig, Scope, Truncation
from ghostgeo.synthscene import FAR_PLANE, Scene, panorama, propose_candidates
from ghostgeo.topograph import Pose, TopoGraph

POSE_TOL = 1e-6
BACKBONE_GRID = 16
BACKBONE_SEED = 0x5EED


class FrozenBackbone:
    """Stand-in for the frozen 2-D visual encoder.

    Block-averages the (far-filled, normalised) depth to a 16x16 grid and
    maps it through a fixed random matrix. Never trained; its only job is to
    give ghosts a deterministic, view-dependent base feature.
    """

    def __init__(self, d_model: int, seed: int = BACKBONE_SEED):
        rng = np.random.default_rng(seed)
        self.d_model = d_model
        self.matrix = rng.normal(size=(d_model, BACKBONE_GRID * BACKBONE_GRID)) / BACKBONE_GRID

    def __call__(self, depth: DepthMap) -> np.ndarray:
        z = np.where(depth.valid_mask(), depth.values, FAR_PLANE) / FAR_PLANE
        h, w = z.shape
        gh, gw = h // BACKBONE_GRID, w // BACKBONE_GRID
        if gh == 0 or gw == 0:
            raise ShapeError(f"depth map {z.shape} smaller than backbone grid {BACKBONE_GRID}")
        pooled = z[: gh * BACKBONE_GRID, : gw * BACKBONE_GRID].reshape(BACKBONE_GRID, gh, BACKBONE_GRID, gw).mean(axis=(1, 3))
        return np.tanh(self.matrix @ pooled.ravel())


_backbones: dict[int, FrozenBackbone] = {}


def backbone(d_model: int) -> FrozenBackbone:
    if d_model not in _backbones:
        _backbones[d_model] = FrozenBackbone(d_model)
    return _backbones[d_model]


def crop_2d(depth: DepthMap, threshold: float) -> DepthMap:
    """Zero (invalidate) pixels whose depth exceeds ``threshold``."""
    vals = np.array(depth.values, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        vals[vals > threshold] = 0.0
    return DepthMap(depth.intrinsics, vals)


def geometry_cloud(depth: DepthMap, cfg: PipelineConfig) -> FixedCloud:
    """Depth view -> fixed-size cloud according to the truncation setting."""
    if cfg.truncation is Truncation.CROP2D:
        depth = crop_2d(depth, cfg.crop_threshold)
    pts = project_depth(depth)
    if cfg.truncation is Truncation.Z3D:
        pts = truncate_z(pts, cfg.d_max)
    return fix_size(pts, cfg.n_pts)


def backbone_input(depth: DepthMap, cfg: PipelineConfig) -> DepthMap:
    if cfg.truncation is Truncation.CROP2D and cfg.crop2d_scope is Scope.GLOBAL:
        return crop_2d(depth, cfg.crop_threshold)
    return depth


def encode_views(views: list[DepthMap], params: EncoderParams, cfg: PipelineConfig) -> list[GeomFeature]:
    clouds = [geometry_cloud(v, cfg) for v in views]
    if not clouds:
        return []
    g, _ = encode_batch(clouds, params, Mode.EVAL)
    return [GeomFeature(row, empty=c.empty) for row, c in zip(g, clouds)]


def _check_pose(graph: TopoGraph, pose: Pose) -> None:
    cur = graph.current.pose
    dtheta = math.remainder(cur.theta - pose.theta, 2 * math.pi)
    if abs(cur.x - pose.x) > POSE_TOL or abs(cur.y - pose.y) > POSE_TOL or abs(dtheta) > POSE_TOL:
        raise DomainError(f"pose {pose} does not match the current node pose {cur}")


def start_feature(scene: Scene, pose: Pose, cfg: PipelineConfig) -> np.ndarray:
    views = panorama(scene, pose)
    return backbone(cfg.D)(backbone_input(views[0], cfg))


def step_pipeline(
    graph: TopoGraph,
    scene: Scene,
    pose: Pose,
    params: EncoderParams,
    cfg: PipelineConfig,
    memo: dict[int, np.ndarray] | None = None,
) -> TopoGraph:
    """Run one perception step on ``graph`` in place and return it.

    ``memo`` (Global scope only) remembers every enhancement computed so
    far, so previously seen ghosts are re-enhanced after each move.
    """
    _check_pose(graph, pose)
    if params.d_model != cfg.D or graph.d_model != cfg.D:
        raise ShapeError(f"params D={params.d_model}, graph D={graph.d_model}, config D={cfg.D}")
    views = panorama(scene, pose)
    cands = propose_candidates(views, pose, cfg.d_max, scene)
    if not cands:
        return graph
    cand_views = [views[c.view] for c in cands]
    bb = backbone(cfg.D)
    bases = [bb(backbone_input(v, cfg)) for v in cand_views]
    ids = graph.add_ghosts([(c.pose, b) for c, b in zip(cands, bases)])
    feats = encode_views(cand_views, params, cfg)
    enh = {}
    for gid, g in zip(ids, feats):
        e = enhancement(g, params, cfg.weighted)
        if e is not None:
            enh[gid] = e
    if cfg.scope is Scope.LOCAL:
        graph.enhance_local(enh)
    else:
        if memo is None:
            memo = {}
        memo.update(enh)
        frontier = set(graph.frontier())
        graph.enhance_global({gid: e for gid, e in memo.items() if gid in frontier})
    return graph
