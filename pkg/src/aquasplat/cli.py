"""Command-line entry point: train, render, eval, gradcheck, synth, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AquasplatError
from .gradients import PARAM_GROUPS, grad_check, standard_gradcheck_scene


def _scene_for(ck, scene_dir):
    from .config import config_from_dict
    from .scene import load_scene
    from .train import build_scene

    if scene_dir is not None:
        return load_scene(scene_dir)
    return build_scene(config_from_dict(ck.config))


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .train import train

    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    resume = load_checkpoint(args.resume) if args.resume else None
    echo = None if args.quiet else print
    res = train(cfg, resume=resume, output_dir=args.output, echo=echo)
    out = Path(args.output or cfg.output_dir)
    print(json.dumps({"final": res.final_eval, "checkpoint": str(out / "final.ckpt")}))
    return 0


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .scene import write_png
    from .train import render_views

    ck = load_checkpoint(args.checkpoint)
    scene = _scene_for(ck, args.scene)
    if not 0 <= args.camera < len(scene.views):
        raise AquasplatError(f"camera index {args.camera} out of range (scene has {len(scene.views)} views)")
    clean, observed, _ = render_views(ck.cloud, ck.medium, scene, args.camera)
    write_png(args.out, clean if args.clean else observed, bits=args.bits)
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate, medium_relative_error, semantic_error

    ck = load_checkpoint(args.checkpoint)
    scene = _scene_for(ck, args.scene)
    result = evaluate(ck.cloud, ck.medium, scene)
    result["semantic_error"] = semantic_error(ck.cloud, scene)
    result["medium"] = {"beta_d": ck.medium.beta_d.tolist(), "beta_b": ck.medium.beta_b.tolist(), "b_inf": ck.medium.b_inf.tolist()}
    if scene.ground_truth is not None:
        result["medium_rel_error"] = medium_relative_error(ck.medium, scene.ground_truth.medium)
    print(json.dumps(result))
    return 0


def cmd_gradcheck(args) -> int:
    groups = PARAM_GROUPS if args.group == "all" else (args.group,)
    scene = standard_gradcheck_scene(args.seed)
    ok = True
    for g in groups:
        rep = grad_check(scene, g, epsilon=args.epsilon)
        passed = rep.passed(args.tol)
        ok &= passed
        print(f"{g:<9} max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_index} n={rep.n_checked} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    from .medium import MediumParams
    from .scene import SynthOptions, save_scene, synth_scene

    medium = MediumParams.from_physical(args.beta_d, args.beta_b, args.b_inf)
    opts = SynthOptions(width=args.width, height=args.height)
    scene = synth_scene(args.seed, args.n_gaussians, args.n_views, medium, opts)
    save_scene(scene, args.out)
    print(json.dumps({"out": str(args.out), "views": len(scene.views), "holdout": scene.holdout}))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import VARIANTS, run_ablation
    from .config import load_config

    cfg = load_config(args.config)
    if args.output:
        cfg.output_dir = args.output
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    rows = run_ablation(cfg, variants, echo=lambda row: print(json.dumps(row), flush=True))
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "ablation.json").write_text(json.dumps(rows, indent=2))
    return 0


def _triple(text: str) -> list[float]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected one value or three comma-separated values")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aquasplat", description="Underwater Gaussian splatting trainer")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--output", help="output directory (default: config output_dir)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--iterations", type=int, help="override the iteration budget")
    t.add_argument("--quiet", action="store_true", help="do not echo log lines")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one scene camera from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--scene", help="scene directory (default: the scene named in the checkpoint config)")
    mode = r.add_mutually_exclusive_group()
    mode.add_argument("--clean", action="store_true", help="medium-free radiance")
    mode.add_argument("--observed", action="store_true", help="through the medium (default)")
    r.add_argument("--bits", type=int, choices=(8, 16), default=16)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    g.add_argument("--group", default="all", choices=("all",) + PARAM_GROUPS)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=3)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-gaussians", type=int, default=200)
    s.add_argument("--n-views", type=int, default=8)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--beta-d", type=_triple, default=[0.2, 0.2, 0.2])
    s.add_argument("--beta-b", type=_triple, default=[0.2, 0.2, 0.2])
    s.add_argument("--b-inf", type=_triple, default=[0.1, 0.3, 0.4])
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("ablate", help="run the M1/M2/M3/full ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--output")
    a.add_argument("--variants", help="comma-separated subset of M1,M2,M3,full")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AquasplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
