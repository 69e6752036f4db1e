"""Point-set encoder, gated residual fusion, and hand-written backpropagation.

The encoder is a shared per-point MLP 3 -> 64 -> 128 -> 256 (linear,
batch norm, ReLU at every layer) followed by a channel-wise max over
points. Its 256-d output ``g`` is projected to the ghost-feature width
``D`` and added to the frozen ghost feature::

    fused = v_ghost + lam * (W_proj @ g)        # weighted fusion
    fused = v_ghost + W_proj @ g                # direct fusion (ablation)

Internally everything is batched over clouds, shape ``(B, N, C)``. Batch
norm statistics are taken over the N points of each cloud separately.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ghostgeo.errors import NumericError, ShapeError, StructuralError
from ghostgeo.geometry import FixedCloud

CHANNELS = (64, 128, 256)
GEOM_DIM = CHANNELS[-1]
DEFAULT_D = 768
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAINABLE = (
    "w1", "b1", "gamma1", "beta1",
    "w2", "b2", "gamma2", "beta2",
    "w3", "b3", "gamma3", "beta3",
    "w_proj", "lam",
)  # fmt: skip
BUFFERS = ("running_mean1", "running_var1", "running_mean2", "running_var2", "running_mean3", "running_var3")

CKPT_MAGIC = b"LCGP"
CKPT_VERSION = 1


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def _expected_shapes(d_model: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = 3
    for i, c in enumerate(CHANNELS, start=1):
        shapes[f"w{i}"] = (c, fan_in)
        for name in ("b", "gamma", "beta", "running_mean", "running_var"):
            shapes[f"{name}{i}"] = (c,)
        fan_in = c
    shapes["w_proj"] = (d_model, GEOM_DIM)
    shapes["lam"] = ()
    return shapes


class EncoderParams:
    """All learnable state plus batch-norm running statistics.

    Tensors live in a flat name -> ndarray mapping; ``lam`` is a 0-d array so
    every entry can be updated in place the same way.
    """

    def __init__(self, tensors: dict[str, np.ndarray], d_model: int):
        self.d_model = int(d_model)
        self.tensors = {k: np.asarray(v) for k, v in tensors.items()}
        self.check_shapes()

    @classmethod
    def initialize(cls, d_model: int = DEFAULT_D, seed: int | np.random.Generator = 0, dtype=np.float64):
        """Uniform(+-1/sqrt(fan_in)) weights, unit-scale batch norm, gate at zero."""
        rng = np.random.default_rng(seed)
        t: dict[str, np.ndarray] = {}
        fan_in = 3
        for i, c in enumerate(CHANNELS, start=1):
            bound = 1.0 / np.sqrt(fan_in)
            t[f"w{i}"] = rng.uniform(-bound, bound, size=(c, fan_in))
            t[f"b{i}"] = rng.uniform(-bound, bound, size=c)
            t[f"gamma{i}"] = np.ones(c)
            t[f"beta{i}"] = np.zeros(c)
            t[f"running_mean{i}"] = np.zeros(c)
            t[f"running_var{i}"] = np.ones(c)
            fan_in = c
        bound = 1.0 / np.sqrt(GEOM_DIM)
        t["w_proj"] = rng.uniform(-bound, bound, size=(d_model, GEOM_DIM))
        t["lam"] = np.array(0.0)
        return cls({k: v.astype(dtype) for k, v in t.items()}, d_model)

    def check_shapes(self) -> None:
        expected = _expected_shapes(self.d_model)
        missing = set(expected) - set(self.tensors)
        extra = set(self.tensors) - set(expected)
        if missing or extra:
            raise StructuralError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def check_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name} contains non-finite values")
        for i in range(1, len(CHANNELS) + 1):
            if np.any(self.tensors[f"running_var{i}"] < 0):
                raise NumericError(f"running_var{i} has negative entries")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def lam(self) -> float:
        return float(self.tensors["lam"])

    @property
    def dtype(self):
        return self.tensors["w1"].dtype

    def copy(self) -> EncoderParams:
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()}, self.d_model)

    def astype(self, dtype) -> EncoderParams:
        return EncoderParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.d_model)

    def n_trainable(self) -> int:
        return sum(self.tensors[k].size for k in TRAINABLE)


@dataclass(eq=False)
class GeomFeature:
    values: np.ndarray
    empty: bool = False

    def __post_init__(self) -> None:
        if self.values.shape != (GEOM_DIM,):
            raise ShapeError(f"geometric feature must have length {GEOM_DIM}, got {self.values.shape}")


@dataclass(eq=False)
class LayerCache:
    x: np.ndarray  # layer input, (B, N, K)
    h: np.ndarray  # pre-norm
    xhat: np.ndarray
    inv_std: np.ndarray  # (B, C) in train mode, (C,) in eval mode
    y: np.ndarray  # post-norm, pre-ReLU
    mean: np.ndarray
    var: np.ndarray  # biased batch variance (train) or running variance (eval)


@dataclass(eq=False)
class ForwardCache:
    mode: Mode
    layers: list[LayerCache]
    argmax: np.ndarray  # (B, 256) point index of each channel maximum
    g: np.ndarray  # (B, 256)
    empty: np.ndarray  # (B,) bool
    d_model: int
    n_points: int
    # filled by forward_fused
    v_ghost: np.ndarray | None = None
    proj: np.ndarray | None = None
    weighted: bool = True
    fused: np.ndarray | None = field(default=None, repr=False)


def _as_batch(points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, FixedCloud):
        return points.points[None], np.array([points.empty])
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], FixedCloud):
        return np.stack([p.points for p in points]), np.array([p.empty for p in points])
    arr = np.asarray(points)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (N, 3) or (B, N, 3) points, got {arr.shape}")
    return arr, np.zeros(len(arr), dtype=bool)


def encode_batch(
    points,
    params: EncoderParams,
    mode: Mode | str = Mode.EVAL,
    n_points: int | None = None,
    update_running: bool = True,
    empty=None,
) -> tuple[np.ndarray, ForwardCache]:
    """Encode ``B`` clouds of ``N`` points each; returns ``(B, 256)`` features."""
    mode = Mode(mode)
    x, empty_flags = _as_batch(points)
    if empty is not None:
        empty_flags = np.asarray(empty, dtype=bool)
    if n_points is not None and x.shape[1] != n_points:
        raise ShapeError(f"expected {n_points} points per cloud, got {x.shape[1]}")
    params.check_finite()
    if not np.all(np.isfinite(x)):
        raise NumericError("point cloud contains non-finite coordinates")
    x = x.astype(params.dtype, copy=False)
    n = x.shape[1]
    layers = []
    for i in range(1, len(CHANNELS) + 1):
        w, b = params[f"w{i}"], params[f"b{i}"]
        gamma, beta = params[f"gamma{i}"], params[f"beta{i}"]
        h = x @ w.T + b
        if mode is Mode.TRAIN:
            mean = h.mean(axis=1)
            var = h.var(axis=1)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mean[:, None, :]) * inv_std[:, None, :]
            if update_running:
                _update_running(params, i, mean, var, n)
        else:
            mean = params[f"running_mean{i}"]
            var = params[f"running_var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mean) * inv_std
        y = gamma * xhat + beta
        layers.append(LayerCache(x=x, h=h, xhat=xhat, inv_std=inv_std, y=y, mean=mean, var=var))
        x = np.maximum(y, 0.0)
    argmax = np.argmax(x, axis=1)
    g = np.take_along_axis(x, argmax[:, None, :], axis=1)[:, 0, :]
    cache = ForwardCache(
        mode=mode, layers=layers, argmax=argmax, g=g, empty=empty_flags, d_model=params.d_model, n_points=n
    )
    return g, cache


def _update_running(params: EncoderParams, i: int, mean: np.ndarray, var: np.ndarray, n: int) -> None:
    # Running variance tracks the unbiased estimate; clouds are folded in batch order.
    unbias = n / (n - 1) if n > 1 else 1.0
    rm, rv = params[f"running_mean{i}"], params[f"running_var{i}"]
    for mb, vb in zip(mean, var):
        rm *= 1.0 - BN_MOMENTUM
        rm += BN_MOMENTUM * mb
        rv *= 1.0 - BN_MOMENTUM
        rv += BN_MOMENTUM * (vb * unbias)


def encode(
    points, params: EncoderParams, mode: Mode | str = Mode.EVAL, n_points: int | None = None
) -> tuple[GeomFeature, ForwardCache]:
    """Encode a single fixed-size cloud.

    Accepts an ``(N, 3)`` array or a :class:`FixedCloud` (whose ``empty``
    flag is carried onto the result). Train mode normalises with the
    cloud's own statistics and folds them into the running averages.
    """
    if isinstance(points, FixedCloud):
        pts, empty = points.points, points.empty
    else:
        pts, empty = np.asarray(points), False
    if pts.ndim != 2:
        raise ShapeError(f"expected a single (N, 3) cloud, got {pts.shape}")
    g, cache = encode_batch(pts, params, mode, n_points=n_points, empty=[empty])
    return GeomFeature(g[0], empty=bool(empty)), cache


def projection(g: GeomFeature | np.ndarray, params: EncoderParams) -> np.ndarray:
    vals = g.values if isinstance(g, GeomFeature) else np.asarray(g)
    if vals.shape[-1] != GEOM_DIM:
        raise ShapeError(f"geometric feature width {vals.shape[-1]} != {GEOM_DIM}")
    return vals @ params["w_proj"].T


def enhancement(g: GeomFeature, params: EncoderParams, weighted: bool = True) -> np.ndarray | None:
    """The additive term ``lam * W_proj g`` (or ``W_proj g`` when unweighted); None for empty clouds."""
    if g.empty:
        return None
    proj = projection(g, params)
    return params.lam * proj if weighted else proj


def fuse(v_ghost: np.ndarray, g: GeomFeature, params: EncoderParams, weighted: bool = True) -> np.ndarray:
    """Residual fusion; output length always equals ``len(v_ghost)``."""
    v = np.asarray(v_ghost)
    if v.shape != (params.d_model,):
        raise ShapeError(f"ghost feature has shape {v.shape}, expected ({params.d_model},)")
    if g.values.shape != (GEOM_DIM,):
        raise ShapeError(f"geometric feature has shape {g.values.shape}, expected ({GEOM_DIM},)")
    if g.empty or (weighted and params.lam == 0.0):
        # returned unchanged, so -0.0 entries survive bit-for-bit
        return v.copy()
    return v + enhancement(g, params, weighted)


def forward_fused(
    points,
    v_ghost: np.ndarray,
    params: EncoderParams,
    mode: Mode | str = Mode.TRAIN,
    weighted: bool = True,
    update_running: bool = True,
    empty=None,
) -> tuple[np.ndarray, ForwardCache]:
    """Batched ``encode`` followed by fusion. Returns ``(B, D)`` fused features and the cache."""
    g, cache = encode_batch(points, params, mode, update_running=update_running, empty=empty)
    v = np.asarray(v_ghost, dtype=params.dtype)
    if v.ndim == 1:
        v = np.broadcast_to(v, (len(g), v.shape[0]))
    if v.shape != (len(g), params.d_model):
        raise ShapeError(f"ghost features shape {v.shape}, expected ({len(g)}, {params.d_model})")
    proj = g @ params["w_proj"].T
    gate = params["lam"] if weighted else 1.0
    fused = v + gate * proj * ~cache.empty[:, None]
    cache.v_ghost, cache.proj, cache.weighted, cache.fused = v, proj, weighted, fused
    return fused, cache


def backward(cache: ForwardCache, grad_out: np.ndarray, params: EncoderParams) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``forward_fused`` w.r.t. every trainable tensor.

    Also returns ``"points"`` (B, N, 3) and ``"v_ghost"`` (B, D) input gradients.
    """
    if cache.proj is None:
        raise StructuralError("cache was not produced by forward_fused")
    if cache.d_model != params.d_model:
        raise StructuralError(f"cache built for D={cache.d_model}, params have D={params.d_model}")
    if cache.layers[0].x.shape[1:] != (cache.n_points, 3) or cache.layers[-1].h.shape[-1] != GEOM_DIM:
        raise StructuralError("cache does not match encoder architecture")
    for i, layer in enumerate(cache.layers, start=1):
        if layer.h.shape[-1] != params[f"w{i}"].shape[0]:
            raise StructuralError(f"layer {i} width mismatch between cache and params")
    dout = np.asarray(grad_out, dtype=params.dtype)
    if dout.ndim == 1:
        dout = dout[None]
    if dout.shape != cache.fused.shape:
        raise ShapeError(f"grad_out shape {dout.shape} != output shape {cache.fused.shape}")

    grads: dict[str, np.ndarray] = {"v_ghost": dout.copy()}
    live = dout * ~cache.empty[:, None]
    w_proj = params["w_proj"]
    if cache.weighted:
        lam = params["lam"]
        grads["lam"] = np.asarray(np.sum(cache.proj * live))
        grads["w_proj"] = lam * (live.T @ cache.g)
        dg = lam * (live @ w_proj)
    else:
        grads["lam"] = np.zeros(())
        grads["w_proj"] = live.T @ cache.g
        dg = live @ w_proj

    bsz, n = cache.g.shape[0], cache.n_points
    da = np.zeros((bsz, n, GEOM_DIM), dtype=dg.dtype)
    np.put_along_axis(da, cache.argmax[:, None, :], dg[:, None, :], axis=1)

    for i in range(len(CHANNELS), 0, -1):
        layer = cache.layers[i - 1]
        dy = da * (layer.y > 0)
        grads[f"gamma{i}"] = np.einsum("bnc,bnc->c", dy, layer.xhat)
        grads[f"beta{i}"] = dy.sum(axis=(0, 1))
        dxhat = dy * params[f"gamma{i}"]
        if cache.mode is Mode.TRAIN:
            inv = layer.inv_std[:, None, :]
            dh = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - layer.xhat * (dxhat * layer.xhat).mean(axis=1, keepdims=True)
            )
        else:
            dh = dxhat * layer.inv_std
        k_in = layer.x.shape[-1]
        grads[f"w{i}"] = dh.reshape(-1, dh.shape[-1]).T @ layer.x.reshape(-1, k_in)
        grads[f"b{i}"] = dh.sum(axis=(0, 1))
        da = dh @ params[f"w{i}"]
    grads["points"] = da
    return grads


def squared_norm_loss(fused: np.ndarray) -> float:
    return float(np.sum(fused * fused))


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    probes: dict[str, int]
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def lines(self) -> list[str]:
        return [
            f"{name:8s} probes={self.probes[name]:6d} max_rel_err={err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
            for name, err in self.max_rel_error.items()
        ]


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    params: EncoderParams,
    points,
    v_ghost: np.ndarray,
    weighted: bool = True,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_probes: int | None = None,
    seed: int = 0,
    fd_dtype=np.longdouble,
) -> GradCheckReport:
    """Compare analytic gradients of ``||fused||^2`` to central differences.

    Train-mode forward, running statistics untouched. Tensors larger than
    ``max_probes`` are checked on a random subset of entries. The difference
    quotients are evaluated in ``fd_dtype`` (extended precision by default)
    so that mathematically-zero gradients, such as pre-norm biases, are not
    swamped by float64 cancellation noise.
    """
    params.check_finite()
    base = params.astype(np.float64)
    fused, cache = forward_fused(points, v_ghost, base, Mode.TRAIN, weighted, update_running=False)
    analytic = backward(cache, 2.0 * fused, base)
    rng = np.random.default_rng(seed)

    probe_params = params.astype(fd_dtype)
    pts = np.asarray(points.points if isinstance(points, FixedCloud) else points).astype(fd_dtype)
    v = np.asarray(v_ghost).astype(fd_dtype)

    def loss() -> float:
        out, _ = forward_fused(pts, v, probe_params, Mode.TRAIN, weighted, update_running=False)
        return np.sum(out * out)

    errors: dict[str, float] = {}
    probes: dict[str, int] = {}
    for name in TRAINABLE:
        tensor = probe_params[name]
        flat = tensor.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, max_probes, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            plus = loss()
            flat[j] = orig - step
            minus = loss()
            flat[j] = orig
            fd = float((plus - minus) / (2 * step))
            a = float(analytic[name].reshape(-1)[j])
            if not (np.isfinite(fd) and np.isfinite(a)):
                raise NumericError(f"non-finite gradient while checking {name}[{j}]")
            worst = max(worst, float(relative_error(a, fd)))
        errors[name] = worst
        probes[name] = len(idx)
    return GradCheckReport(errors, probes, tolerance)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def opt_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> EncoderParams:
    """One bias-corrected Adam update of every trainable tensor, in place."""
    for name in TRAINABLE:
        if name not in grads:
            raise StructuralError(f"missing gradient for {name}")
        if grads[name].shape != params[name].shape:
            raise ShapeError(f"gradient {name} shape {grads[name].shape} != {params[name].shape}")
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in TRAINABLE:
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name][...] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(params))


def encode_checkpoint(params: EncoderParams) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, params.d_model)]
    for name in TRAINABLE + BUFFERS:
        arr = params[name]
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def load_checkpoint(path: str | Path) -> EncoderParams:
    return decode_checkpoint(Path(path).read_bytes())


def decode_checkpoint(data: bytes) -> EncoderParams:
    if data[:4] != CKPT_MAGIC:
        raise StructuralError(f"bad checkpoint magic {data[:4]!r}")
    try:
        version, d_model = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise StructuralError(f"unsupported checkpoint version {version}")
        off = 12
        tensors = {}
        while off < len(data):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if off + 4 * count > len(data):
                raise StructuralError(f"truncated tensor {name}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
            off += 4 * count
            tensors[name] = arr.reshape(dims)
    except (struct.error, UnicodeDecodeError) as exc:
        raise StructuralError(f"corrupt checkpoint: {exc}") from exc
    return EncoderParams(tensors, d_model)
