"""Desk-scale supervision: classify candidate views as blocked or open.

The frozen "baseline" scores a view by a per-direction base feature dotted
with a frozen readout; only the geometry encoder (and its fusion gate) is
trained, so any accuracy above the baseline comes from the point cloud.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ghostgeo.encoder import AdamState, EncoderParams, Mode, backward, forward_fused, opt_step
from ghostgeo.errors import DomainError, NumericError
from ghostgeo.geometry import DEFAULT_INTRINSICS, DepthMap
from ghostgeo.harness.config import PipelineConfig
from ghostgeo.harness.pipeline import geometry_cloud
from ghostgeo.synthscene import N_VIEWS, Box, Scene, render_view
from ghostgeo.topograph import Pose

PATCH = 32


@dataclass(frozen=True)
class ToyTaskSpec:
    n_samples: int = 2000
    seed: int = 7
    blocked_dist: float = 1.5
    blocked_frac: float = 0.3
    val_frac: float = 0.2
    batch: int = 32
    lr: float = 1e-4

    def __post_init__(self) -> None:
        if self.n_samples < 10:
            raise DomainError(f"n_samples must be >= 10, got {self.n_samples}")
        if not 0 < self.val_frac < 1:
            raise DomainError(f"val_frac must lie in (0, 1), got {self.val_frac}")


@dataclass
class ToySample:
    scene: Scene
    pose: Pose
    bucket: int
    label: int


def central_block(arr: np.ndarray, size: int = PATCH) -> np.ndarray:
    k = DEFAULT_INTRINSICS
    r0 = int(round(k.cy)) - size // 2
    c0 = int(round(k.cx)) - size // 2
    return arr[r0 : r0 + size, c0 : c0 + size]


def blocked_label(depth: np.ndarray, hit: np.ndarray, dist: float, frac: float) -> int:
    """1 if box hits within ``dist`` cover at least ``frac`` of the central patch."""
    z, h = central_block(depth), central_block(hit)
    with np.errstate(invalid="ignore"):
        near_box = (h >= 0) & (z <= dist)
    return int(near_box.mean() >= frac)


def direction_bucket(theta: float) -> int:
    return int(math.floor((theta % (2 * math.pi)) / (2 * math.pi / N_VIEWS))) % N_VIEWS


def random_scene(rng: np.random.Generator) -> tuple[Scene, Pose]:
    """Agent at the origin facing a random heading; one box roughly ahead plus distractors."""
    theta = float(rng.uniform(-math.pi, math.pi))
    boxes = []
    dist = rng.uniform(0.6, 4.0)
    lateral = rng.uniform(-1.0, 1.0)
    cx = dist * math.cos(theta) - lateral * math.sin(theta)
    cy = dist * math.sin(theta) + lateral * math.cos(theta)
    boxes.append(_box_at(rng, cx, cy))
    for _ in range(int(rng.integers(0, 4))):
        r, a = rng.uniform(1.0, 8.0), rng.uniform(-math.pi, math.pi)
        boxes.append(_box_at(rng, r * math.cos(a), r * math.sin(a)))
    boxes = [b for b in boxes if b.footprint_distance(0.0, 0.0) > 0.3]
    return Scene(tuple(boxes), (-12.0, -12.0, 12.0, 12.0), 0.0, "toy"), Pose(0.0, 0.0, theta)


def _box_at(rng, cx, cy) -> Box:
    sx, sy = rng.uniform(0.2, 1.0, size=2)
    h = rng.uniform(0.8, 2.5)
    cx, cy = float(np.clip(cx, -10.5, 10.5)), float(np.clip(cy, -10.5, 10.5))
    return Box((cx - sx, cy - sy, 0.0), (cx + sx, cy + sy, h))


def make_dataset(spec: ToyTaskSpec) -> list[tuple[ToySample, DepthMap]]:
    rng = np.random.default_rng(spec.seed)
    out = []
    for _ in range(spec.n_samples):
        scene, pose = random_scene(rng)
        depth, hit = render_view(scene, pose)
        label = blocked_label(depth, hit, spec.blocked_dist, spec.blocked_frac)
        out.append((ToySample(scene, pose, direction_bucket(pose.theta), label), DepthMap(DEFAULT_INTRINSICS, depth)))
    return out


@dataclass
class ToyResult:
    params: EncoderParams
    train_acc: float
    val_acc: float
    baseline_train_acc: float
    baseline_val_acc: float
    iters: int
    positive_rate: float
    # diagnostic: held-out accuracy when each cloud is normalised by its own
    # point statistics (as in training) instead of the running averages
    val_acc_cloud_stats: float = float("nan")
    losses: list[float] = field(default_factory=list, repr=False)
    initial_val_scores: np.ndarray | None = field(default=None, repr=False)
    baseline_val_scores: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ToyData:
    clouds: np.ndarray  # (S, n_pts, 3)
    empty: np.ndarray  # (S,)
    buckets: np.ndarray
    labels: np.ndarray
    train: np.ndarray  # indices
    val: np.ndarray


def prepare(spec: ToyTaskSpec, cfg: PipelineConfig, dataset=None) -> ToyData:
    if dataset is None:
        dataset = make_dataset(spec)
    fixed = [geometry_cloud(depth, cfg) for _, depth in dataset]
    labels = np.array([s.label for s, _ in dataset])
    buckets = np.array([s.bucket for s, _ in dataset])
    order = np.random.default_rng([spec.seed, 2]).permutation(len(dataset))
    n_val = int(round(spec.val_frac * len(dataset)))
    return ToyData(
        clouds=np.stack([f.points for f in fixed]),
        empty=np.array([f.empty for f in fixed]),
        buckets=buckets,
        labels=labels,
        train=np.sort(order[n_val:]),
        val=np.sort(order[:n_val]),
    )


def frozen_heads(d_model: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bucket base features and the readout vector; never updated."""
    rng = np.random.default_rng([seed, 1])
    v = rng.normal(size=(N_VIEWS, d_model))
    r = rng.normal(size=d_model) / math.sqrt(d_model)
    return v, r


def _scores(data: ToyData, idx, params, v, r, weighted, mode=Mode.EVAL, chunk: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(idx), chunk):
        sel = idx[s : s + chunk]
        fused, _ = forward_fused(
            data.clouds[sel], v[data.buckets[sel]], params, mode, weighted, update_running=False, empty=data.empty[sel]
        )
        out.append(fused @ r)
    return np.concatenate(out) if out else np.zeros(0)


def _accuracy(scores, labels) -> float:
    return float(np.mean((scores > 0).astype(int) == labels))


def train_toy(
    spec: ToyTaskSpec,
    params: EncoderParams,
    cfg: PipelineConfig,
    iters: int = 1000,
    data: ToyData | None = None,
) -> ToyResult:
    """Train ``params`` (a copy) on the blocked/open task with Adam and logistic loss."""
    if not 0 <= iters <= 1000:
        raise DomainError(f"iteration budget is 0..1000, got {iters}")
    if data is None:
        data = prepare(spec, cfg)
    params = params.copy()
    v, r = frozen_heads(params.d_model, spec.seed)
    weighted = cfg.weighted
    base_all = v[data.buckets] @ r
    initial_val = _scores(data, data.val, params, v, r, weighted)

    rng = np.random.default_rng([spec.seed, 3])
    state = AdamState()
    losses = []
    for _ in range(iters):
        sel = rng.choice(data.train, size=min(spec.batch, len(data.train)), replace=False)
        y = data.labels[sel]
        fused, cache = forward_fused(data.clouds[sel], v[data.buckets[sel]], params, Mode.TRAIN, weighted, empty=data.empty[sel])
        s = fused @ r
        loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
        if not math.isfinite(loss):
            raise NumericError(f"toy training diverged at iteration {len(losses)} (loss {loss})")
        losses.append(loss)
        p = 0.5 * (1.0 + np.tanh(0.5 * s))
        grad_out = ((p - y) / len(sel))[:, None] * r[None, :]
        grads = backward(cache, grad_out, params)
        opt_step(params, grads, state, lr=spec.lr)

    return ToyResult(
        params=params,
        train_acc=_accuracy(_scores(data, data.train, params, v, r, weighted), data.labels[data.train]),
        val_acc=_accuracy(_scores(data, data.val, params, v, r, weighted), data.labels[data.val]),
        baseline_train_acc=_accuracy(base_all[data.train], data.labels[data.train]),
        baseline_val_acc=_accuracy(base_all[data.val], data.labels[data.val]),
        iters=iters,
        positive_rate=float(data.labels.mean()),
        val_acc_cloud_stats=_accuracy(_scores(data, data.val, params, v, r, weighted, Mode.TRAIN), data.labels[data.val]),
        losses=losses,
        initial_val_scores=initial_val,
        baseline_val_scores=base_all[data.val],
    )
