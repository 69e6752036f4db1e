"""Command-line entry point.

Exit codes: 0 success, 1 other package error, 2 configuration error,
3 numeric error, 4 stuck episode.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ghostgeo import encoder as enc
from ghostgeo import geometry as geo
from ghostgeo.errors import ConfigError, GhostGeoError, NumericError
from ghostgeo.harness.config import PipelineConfig, load_config
from ghostgeo.harness.episode import Policy, run_episode
from ghostgeo.harness.suite import AXES, ablate, ablation_table, eval_suite
from ghostgeo.harness.toytask import ToyTaskSpec, train_toy
from ghostgeo.metrics import format_table
from ghostgeo.synthscene import PRESETS, load_scene, make_preset
from ghostgeo.topograph import Pose

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STUCK = 0, 1, 2, 3, 4


def _read_cloud(path: str | None) -> np.ndarray:
    if path is None or path == "-":
        text = sys.stdin.read()
        rows = [line.split() for line in text.splitlines() if line.strip()]
        return geo.as_cloud(np.array(rows, dtype=np.float64).reshape(-1, 3))
    return geo.read_xyz(path)


def _write_cloud(points: np.ndarray, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(geo.format_xyz(points))
    else:
        geo.write_xyz(points, path)


def _params(args, cfg: PipelineConfig) -> enc.EncoderParams:
    if getattr(args, "ckpt", None):
        params = enc.load_checkpoint(args.ckpt)
        if params.d_model != cfg.D:
            raise ConfigError(f"checkpoint D={params.d_model} but config D={cfg.D}")
        return params
    return enc.EncoderParams.initialize(cfg.D, seed=getattr(args, "init_seed", 0))


def _xy(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_project(args) -> int:
    depth = geo.read_dpf(args.dpf)
    pts = geo.project_depth(depth)
    if args.xyz:
        geo.write_xyz(pts, args.xyz)
        print(f"{len(pts)} points -> {args.xyz}")
    else:
        _write_cloud(pts, None)
    return EXIT_OK


def cmd_truncate(args) -> int:
    _write_cloud(geo.truncate_z(_read_cloud(args.input), args.dmax), args.out)
    return EXIT_OK


def cmd_fps(args) -> int:
    _write_cloud(geo.farthest_point_sample(_read_cloud(args.input), args.n), args.out)
    return EXIT_OK


def cmd_encode(args) -> int:
    params = enc.load_checkpoint(args.ckpt)
    cloud = geo.fix_size(_read_cloud(args.input), args.n)
    feat, _ = enc.encode(cloud, params, enc.Mode.EVAL)
    if feat.empty:
        print("# empty cloud", file=sys.stderr)
    sys.stdout.write("".join(f"{x:.9g}\n" for x in feat.values))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True
    for i in range(args.instances):
        params = enc.EncoderParams.initialize(args.D, seed=rng)
        if i > 0:
            params.tensors["lam"][...] = rng.normal()
        pts = rng.normal(size=(args.npts, 3))
        v = rng.normal(size=args.D)
        rep = enc.grad_check(params, pts, v, max_probes=args.max_probes, seed=args.seed + i)
        name, err = rep.worst()
        print(f"instance {i}: lam={params.lam:+.3f} worst={name} {err:.3e} {'ok' if rep.passed else 'FAIL'}")
        if args.verbose:
            print("\n".join("  " + line for line in rep.lines()))
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_episode(args) -> int:
    cfg = load_config(args.cfg)
    if args.scene:
        if args.start is None or args.goal is None:
            raise ConfigError("--scene needs --start x,y[,theta] and --goal x,y")
        scene = load_scene(args.scene)
        start, goal, reference = Pose(*args.start), args.goal[:2], None
    else:
        spec = make_preset(args.preset, args.seed)
        scene, start, goal, reference = spec.scene, spec.start, spec.goal, spec.reference
    params = _params(args, cfg)
    out = run_episode(scene, start, goal, args.policy, params, cfg, args.max_steps, args.seed, reference, args.id)
    print(out.result.to_json())
    if args.log:
        Path(args.log).write_text("".join(json.dumps(e) + "\n" for e in out.log))
    return EXIT_STUCK if out.stuck else EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = load_config(args.cfg)
    spec = ToyTaskSpec(n_samples=args.samples, seed=args.seed, lr=args.lr)
    params = enc.EncoderParams.initialize(cfg.D, seed=args.seed)
    res = train_toy(spec, params, cfg, args.iters)
    print(f"iters={res.iters} positive_rate={res.positive_rate:.3f}")
    print(f"train_acc={res.train_acc:.4f} val_acc={res.val_acc:.4f}")
    print(f"val_acc_cloud_stats={res.val_acc_cloud_stats:.4f} (diagnostic, per-cloud normalisation)")
    print(f"baseline_train_acc={res.baseline_train_acc:.4f} baseline_val_acc={res.baseline_val_acc:.4f}")
    print(f"lambda={res.params.lam:.6g}")
    if args.out:
        enc.save_checkpoint(res.params, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.cfg)
    run = eval_suite(args.preset, _params(args, cfg), cfg, range(args.seeds), args.policy, args.max_steps, args.out)
    print(format_table({"unweighted mean": run.summary}))
    print(f"episodes={run.summary.n}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.cfg)
    toy = ToyTaskSpec(n_samples=args.toy_samples, seed=args.toy_seed) if args.toy else None
    rows = ablate(
        args.axis, _params(args, cfg), cfg, args.preset, range(args.seeds), args.policy, args.max_steps, toy, args.toy_iters
    )
    print(ablation_table(args.axis, rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ghostgeo", description="Geometry-enhanced ghost-node navigation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="back-project a DPF1 depth file")
    p.add_argument("dpf")
    p.add_argument("--xyz", help="write points here instead of stdout")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("truncate", help="keep points with z <= dmax")
    p.add_argument("--dmax", type=float, required=True)
    p.add_argument("--in", dest="input", help="XYZ file (default stdin)")
    p.add_argument("--out", help="XYZ file (default stdout)")
    p.set_defaults(func=cmd_truncate)

    p = sub.add_parser("fps", help="farthest point sampling")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fps)

    p = sub.add_parser("encode", help="encode an XYZ cloud with an LCGP1 checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input")
    p.add_argument("--n", type=int, default=256, help="fixed cloud size")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("gradcheck", help="finite-difference check of the hand-written backward pass")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--npts", type=int, default=8)
    p.add_argument("--D", type=int, default=16)
    p.add_argument("--max-probes", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    def nav_args(p):
        p.add_argument("--cfg", help="PipelineConfig JSON")
        p.add_argument("--ckpt", help="LCGP1 checkpoint (default: fresh init, lambda = 0)")
        p.add_argument("--init-seed", type=int, default=0)
        p.add_argument("--policy", choices=[x.value for x in Policy], default="greedy")
        p.add_argument("--max-steps", type=int, default=30)

    p = sub.add_parser("episode", help="run one episode")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scene", help="scene JSON")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--start", type=_xy)
    p.add_argument("--goal", type=_xy)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--id", default="episode")
    p.add_argument("--log", help="write the graph log as JSON lines")
    nav_args(p)
    p.set_defaults(func=cmd_episode)

    p = sub.add_parser("train-toy", help="train the encoder on the blocked/open toy task")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--cfg")
    p.add_argument("--out", help="write trained LCGP1 checkpoint")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate over presets x seeds")
    p.add_argument("--preset", default="all", choices=["all", *sorted(PRESETS)])
    p.add_argument("--seeds", type=int, default=25, help="use seeds 0..N-1")
    p.add_argument("--out", help="JSON-lines results")
    nav_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--preset", default="all", choices=["all", *sorted(PRESETS)])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--toy", action="store_true", help="also train the toy task per setting")
    p.add_argument("--toy-iters", type=int, default=1000)
    p.add_argument("--toy-samples", type=int, default=2000)
    p.add_argument("--toy-seed", type=int, default=7)
    nav_args(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GhostGeoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
