"""Command-line front end.

Exit codes: 0 success, 1 stage failure (one `ERROR <stage>: ...` line on
stderr), 2 bad usage. Global flags come before the subcommand:

    physrec --seed 3 --precision 64 generate --preset elastic-block --out d/
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import precision
from .adjoint import fd_check
from .bridge import p2g_features
from .errors import PhysrecError, UsageError
from .images import write_ppm, write_raw
from .pipeline import Run, RunConfig, completed_rounds, evaluate, iterate
from .render import render_image
from .scenes import (RingSpec, SceneSpec, check_scene_cfl, generate,
                     load_dataset, make_scene)
from .storage import load_field, load_json, load_particles


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="physrec",
        description="Recover geometry and material parameters of a moving "
                    "object from multi-view video.")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (default: config value, else 0)")
    p.add_argument("--precision", choices=("32", "64"), default="32")
    p.add_argument("--threads", type=int, default=1)
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="simulate a scene and write a dataset")
    g.add_argument("--preset")
    g.add_argument("--spec", help="scene JSON (overrides --preset)")
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int)
    g.add_argument("--substeps", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)

    def run_parser(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--run", required=True, help="run directory")
        q.add_argument("--config", help="run-config JSON")
        q.add_argument("--train-views", type=int, default=None)
        q.add_argument("--lpo-mode", default=None,
                       choices=("full", "features_only", "positions_only",
                                "grid_only", "none"))
        return q

    run_parser("fit-static", "fit the frame-0 density/appearance field")
    run_parser("fit-velocity", "fit the shared initial velocity")
    run_parser("fit-physics", "fit material parameters")
    run_parser("lpo", "refine particle positions and features")
    it = run_parser("iterate", "run the full multi-round loop")
    it.add_argument("--rounds", type=int, default=None)
    ev = run_parser("eval", "score completed rounds; write metrics and figures")
    ev.add_argument("--round", type=int, default=None,
                    help="only this round (default: all completed)")

    r = sub.add_parser("render", help="render a saved field or particle set")
    r.add_argument("--data", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--field")
    r.add_argument("--particles")
    r.add_argument("--out", required=True, help="output path prefix")

    f = sub.add_parser("fd-check", help="finite-difference gradient check")
    f.add_argument("--mode", choices=("sim", "render"), default="sim")
    f.add_argument("--samples", type=int, default=6)
    f.add_argument("--threshold", type=float, default=None,
                   help="fail (exit 1) when the max relative error exceeds this")
    f.add_argument("--json", dest="json_out", help="also write the report here")
    return p


def _scene_from_args(args, seed: int) -> SceneSpec:
    if args.spec:
        spec = SceneSpec.from_dict(load_json(args.spec))
    elif args.preset:
        spec = make_scene(args.preset)
    else:
        raise UsageError("generate needs --preset or --spec")
    kw = {"seed": seed}
    for name in ("frames", "substeps"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    spec = replace(spec, **kw)
    ring_kw = {}
    for src, dst in (("views", "count"), ("width", "width"),
                     ("height", "height")):
        if getattr(args, src) is not None:
            ring_kw[dst] = getattr(args, src)
    if "width" in ring_kw:
        # keep the field of view: focal length is stored in pixels
        ring_kw["focal"] = spec.ring.focal * ring_kw["width"] / spec.ring.width
    if ring_kw:
        spec = replace(spec, ring=replace(spec.ring, **ring_kw))
    return spec


def _open_run(args):
    ds = load_dataset(args.data)
    cfg_path = os.path.join(args.run, "config.json")
    if args.config:
        cfg = RunConfig.from_dict(load_json(args.config))
    elif os.path.exists(cfg_path):
        cfg = RunConfig.from_dict(load_json(cfg_path))
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.train_views is not None:
        cfg.train_views = args.train_views
    if getattr(args, "lpo_mode", None) is not None:
        cfg.stages.lpo = replace(cfg.stages.lpo, mode=args.lpo_mode)
    if getattr(args, "rounds", None) is not None:
        cfg.stages.loop = replace(cfg.stages.loop, rounds=args.rounds)
    return ds, Run(ds, args.run, cfg)


def _cmd_generate(args) -> int:
    spec = _scene_from_args(args, 0 if args.seed is None else args.seed)
    check_scene_cfl(spec)
    manifest = generate(spec, args.out)
    print(f"wrote {manifest['n_views']} views x {manifest['n_frames']} frames "
          f"({manifest['n_particles']} particles) to {args.out}")
    return 0


def _require(run: Run, key: str, stage: str):
    if not run.state.done(key):
        raise UsageError(f"stage {stage!r} needs {key} to have completed "
                         f"in this run directory")


def _cmd_stage(args) -> int:
    _, run = _open_run(args)
    cmd = args.command
    if cmd == "fit-static":
        run.stage_static(1)
        print(f"static field written to {run.round_dir(1)}")
        return 0
    _require(run, "round01_static", cmd)
    fld, _ = run.stage_static(1)
    particles, v0 = None, None
    if cmd == "fit-velocity":
        run.stage_velocity(1, fld)
        print(f"initial velocity written to {run.round_dir(1)}")
        return 0
    _require(run, "round01_velocity", cmd)
    particles, v0 = run.stage_velocity(1, fld)
    if cmd == "fit-physics":
        run.stage_physics(1, particles, v0)
        print(f"material parameters written to {run.round_dir(1)}")
        return 0
    _require(run, "round01_physics", cmd)
    model = run.stage_physics(1, particles, v0)
    run.stage_lpo(1, particles, model, v0)
    print(f"refined particles written to {run.round_dir(1)}")
    return 0


def _cmd_iterate(args) -> int:
    ds, run = _open_run(args)
    report = iterate(ds, args.run, run.cfg)
    last = report["per_round"][-1]
    print(f"round {last['round']}: psnr {last['psnr']:.2f} dB, "
          f"ssim {last['ssim']:.4f}")
    print(f"report written to {os.path.join(args.run, 'report.json')}")
    return 0


def _cmd_eval(args) -> int:
    _, run = _open_run(args)
    rounds = completed_rounds(run)
    if args.round is not None:
        rounds = [r for r in rounds if r == args.round]
    report = evaluate(run, rounds)
    for per in report["per_round"]:
        print(f"round {per['round']}: psnr {per['psnr']:.2f} dB, "
              f"ssim {per['ssim']:.4f}")
    print(f"metrics written to {os.path.join(args.run, 'metrics.csv')}")
    return 0


def _cmd_render(args) -> int:
    ds = load_dataset(args.data)
    if not 0 <= args.view < ds.n_views:
        raise UsageError(f"view {args.view} out of range [0, {ds.n_views})")
    spec = ds.spec()
    if bool(args.field) == bool(args.particles):
        raise UsageError("render needs exactly one of --field / --particles")
    if args.field:
        fld = load_field(args.field)
    else:
        fld = p2g_features(load_particles(args.particles), spec.lattice())
    img = render_image(fld, ds.cameras[args.view], spec.render_config())
    arr = img.detach().cpu().numpy()
    write_raw(args.out + ".raw", arr)
    write_ppm(args.out + ".ppm", arr[:, :, :3])
    print(f"wrote {args.out}.ppm and {args.out}.raw")
    return 0


def _cmd_fd_check(args) -> int:
    from . import fdscenes
    problem = fdscenes.sim_problem if args.mode == "sim" \
        else fdscenes.render_problem
    objective, leaves, h = problem(seed=0 if args.seed is None else args.seed)
    report = fd_check(objective, leaves, h, samples=args.samples,
                      seed=0 if args.seed is None else args.seed)
    for name in sorted(k for k in report if k != "max"):
        print(f"leaf {name}: rel_err {report[name]:.3e}")
    print(f"max rel_err {report['max']:.3e}")
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.threshold is not None and report["max"] > args.threshold:
        raise PhysrecError(
            f"max relative error {report['max']:.3e} exceeds "
            f"threshold {args.threshold:g}", stage="fd-check")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "fit-static": _cmd_stage,
    "fit-velocity": _cmd_stage,
    "fit-physics": _cmd_stage,
    "lpo": _cmd_stage,
    "iterate": _cmd_iterate,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "fd-check": _cmd_fd_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    precision.set_precision(int(args.precision))
    precision.set_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ERROR {e.stage}: {e}", file=sys.stderr)
        return 2
    except PhysrecError as e:
        print(f"ERROR {e.stage}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
