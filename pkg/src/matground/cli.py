"""Command-line pipelines: gen, pretrain, fit, sim, render, eval, interp.

Options come from an optional JSON ``--config`` file overridden by flags.
Every command writes ``resolved_config.json`` next to its outputs; passing
that file back as ``--config`` reruns the command identically. Exit codes:
0 success, 2 bad input, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diff, fit, mpm, particle_gs, scene
from .constitutive.material import (MaterialAdapter, compose_material, load_material,
                                    load_material_adapter, material_to_dict, pretrain_base,
                                    save_material, save_material_adapter)
from .errors import (CatalogError, CompositionError, DifferentiationError, DomainError,
                     FormatError, GeometryError, InversionError, TrainingError)

log = logging.getLogger("matground")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
SNAPSHOT = "resolved_config.json"


class InputError(Exception):
    """Bad or missing command input (exit code 2)."""


# --------------------------------------------------------------------------
# helpers


def _scene_cfg(cfg, args):
    return cfg.replace(precision=args.precision, deterministic=args.deterministic)


def _write_snapshot(directory, args):
    os.makedirs(directory, exist_ok=True)
    snap = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    with open(os.path.join(directory, SNAPSHOT), "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)


def _require(*paths):
    for p in paths:
        if p is None:
            raise InputError("missing required input path")
        if not os.path.exists(p):
            raise InputError(f"input not found: {p}")


def _load_scene(args):
    if getattr(args, "scene", None):
        _require(args.scene)
        with open(args.scene) as fh:
            d = json.load(fh)
        cfg, particles, objects = scene.scene_from_dict(d)
        return _scene_cfg(cfg, args), particles, objects, d.get("material")
    raise InputError("a --scene file is required")


def _cameras(args, default_size=64):
    if getattr(args, "camera", None):
        _require(args.camera)
        return particle_gs.load_cameras(args.camera)
    return [particle_gs.default_camera(default_size)]


def _frame_paths(directory, frames, cameras):
    out = []
    for f in range(frames):
        if cameras == 1:
            out.append([os.path.join(directory, f"frame_{f:04d}.ppm")])
        else:
            out.append([os.path.join(directory, f"frame_{f:04d}_c{c}.ppm")
                        for c in range(cameras)])
    return out


def _render_to(directory, traj, cameras, bits=8):
    os.makedirs(directory, exist_ok=True)
    images = particle_gs.render_trajectory(traj.positions, traj.F, cameras)
    paths = _frame_paths(directory, len(images), len(cameras))
    for imgs, ps in zip(images, paths):
        for img, p in zip(imgs, ps):
            particle_gs.write_ppm(p, img, bits)
    return paths


def _material(path):
    _require(path)
    return load_material(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args):
    if args.preset:
        try:
            bench = scene.make_benchmark(args.preset, args.count, args.seed)
        except CatalogError as err:
            raise InputError(str(err))
        cfg = _scene_cfg(bench.config, args)
        particles, material = bench.particles, bench.material
        preset = scene.get_preset(args.preset)
        objects = [{"shape": bench.shape, "count": len(particles),
                    "velocity": preset.velocity, "seed": args.seed}]
    elif args.scene:
        cfg, particles, objects, mat_dict = _load_scene(args)
        if mat_dict is None:
            raise InputError("scene file has no 'material' entry for the ground truth")
        from .constitutive.material import material_from_dict
        material = material_from_dict(mat_dict, os.path.dirname(os.path.abspath(args.scene)))
    else:
        raise InputError("gen needs --preset or --scene")
    os.makedirs(args.out, exist_ok=True)
    save_material(os.path.join(args.out, "material.json"), material)
    scene.save_scene(os.path.join(args.out, "scene.json"), cfg, objects,
                     material_to_dict(material, args.out, "material"))
    save_every = args.save_every or cfg.substeps
    traj = mpm.simulate(particles, material, cfg, args.steps, save_every)
    traj.save(os.path.join(args.out, "gt.nmtraj"))
    if args.render:
        cams = _cameras(args)
        particle_gs.save_cameras(os.path.join(args.out, "cameras.json"), cams)
        _render_to(os.path.join(args.out, "frames"), traj, cams)
    _write_snapshot(args.out, args)
    print(f"wrote {len(traj)} frames of {len(particles)} particles to {args.out}")


def cmd_pretrain(args):
    if args.target:
        target = _material(args.target)
    else:
        try:
            target = scene.get_preset(args.preset).material()
        except CatalogError as err:
            raise InputError(str(err))
    prior, report = pretrain_base(target.elastic, target.plastic, args.samples, args.seed,
                                  args.epochs)
    os.makedirs(args.out, exist_ok=True)
    save_material(os.path.join(args.out, "prior.json"), prior)
    with open(os.path.join(args.out, "pretrain_report.json"), "w") as fh:
        json.dump({"elastic_rmse": report.elastic_rmse, "plastic_rmse": report.plastic_rmse,
                   "elastic_loss": report.elastic_loss, "plastic_loss": report.plastic_loss},
                  fh, indent=2)
    _write_snapshot(args.out, args)
    print(f"elastic relative RMSE {report.elastic_rmse:.4f}, "
          f"plastic RMSE {report.plastic_rmse:.4g}")


def _pixel_loss(args, particles, reference, cameras):
    frames = list(range(1, len(reference) if args.horizon is None
                        else min(len(reference), args.horizon + 1)))
    kernels = particle_gs.kernels_from_positions(reference.positions[0])
    mode = "identity" if args.ablation == "no-bind" else "mahalanobis"
    if mode == "identity":
        kernels = particle_gs.kernels_from_positions(particles.positions, stride=1)
        binding = particle_gs.bind(kernels, particles, mode="identity")
    else:
        particles, binding, spawned = particle_gs.ensure_coverage(kernels, particles)
        if spawned.size:
            raise InputError("some kernels bind no particle; pixel fitting needs full coverage")
    if args.frames:
        paths = _frame_paths(args.frames, len(reference), len(cameras))
        for ps in paths:
            _require(*ps)
        refs = [[particle_gs.read_ppm(p) for p in ps] for ps in paths]
    else:
        refs = particle_gs.render_trajectory(reference.positions, reference.F, cameras,
                                             kernels, binding)
    return diff.PixelLoss(kernels, binding, particles.positions, cameras, refs, frames,
                          reference.save_every), particles


def cmd_fit(args):
    _require(args.gt, args.prior)
    cfg, particles, _, _ = _load_scene(args)
    base = _material(args.prior)
    reference = mpm.Trajectory.load(args.gt)
    if len(particles) != reference.positions.shape[1]:
        raise InputError(f"scene has {len(particles)} particles, ground truth "
                         f"{reference.positions.shape[1]}")
    fit_cfg = fit.FitConfig(iterations=args.iterations, lr=args.lr,
                            supervision=args.supervision, horizon=args.horizon,
                            checkpoint_every=args.checkpoint_every, seed=args.seed,
                            trainable="base" if args.ablation == "no-adapter" else "adapter",
                            rank=args.rank, alpha=args.alpha)
    os.makedirs(args.out, exist_ok=True)
    if args.fit_v0:
        v0, _, _ = fit.fit_initial_velocity(particles, base, cfg, reference, args.v0_frames,
                                            fit.FitConfig(iterations=args.v0_iterations))
        particles = particles.with_state(
            velocities=np.broadcast_to(v0, particles.velocities.shape).copy())
        with open(os.path.join(args.out, "v0.json"), "w") as fh:
            json.dump(v0.tolist(), fh)
    loss_spec = None
    if args.supervision == "pixels":
        loss_spec, particles = _pixel_loss(args, particles, reference, _cameras(args))
    result = fit.fit_adapter(particles, base, cfg, reference, fit_cfg, loss_spec)
    if result.adapter is not None:
        save_material_adapter(args.out, result.adapter)
    else:
        save_material(os.path.join(args.out, "fitted_base.json"), result.material)
    result.log.save(os.path.join(args.out, "metrics.jsonl"),
                    os.path.join(args.out, "frames.tsv"))
    result.trajectory.save(os.path.join(args.out, "fitted.nmtraj"))
    _write_snapshot(args.out, args)
    curve = [r["chamfer"] for r in result.log.frames]
    print(f"final loss {result.log.losses[-1] if len(result.log.losses) else float('nan'):.6g}; "
          f"mean chamfer x1e4 {1e4 * float(np.mean(curve)):.4f}")


def _composed(args):
    material = _material(args.material)
    if args.adapter:
        _require(args.adapter)
        adapter = load_material_adapter(args.adapter)
        material = compose_material(material, adapter,
                                    None if args.weight is None else args.weight)
    return material


def cmd_sim(args):
    cfg, particles, _, _ = _load_scene(args)
    material = _composed(args)
    traj = mpm.simulate(particles, material, cfg, args.steps, args.save_every or cfg.substeps)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    traj.save(args.out)
    _write_snapshot(out_dir, args)
    print(f"wrote {len(traj)} frames to {args.out}")


def cmd_render(args):
    _require(args.traj)
    traj = mpm.Trajectory.load(args.traj)
    cams = _cameras(args)
    paths = _render_to(args.out, traj, cams, args.bits)
    _write_snapshot(args.out, args)
    print(f"wrote {sum(len(p) for p in paths)} images to {args.out}")


def cmd_eval(args):
    _require(args.pred, args.gt)
    pred, gt = mpm.Trajectory.load(args.pred), mpm.Trajectory.load(args.gt)
    frames = min(len(pred), len(gt))
    curve = fit.chamfer_curve(pred.positions[:frames], gt.positions[:frames], scale=1e4)
    psnrs = None
    if args.pred_frames and args.gt_frames:
        psnrs = []
        for f in range(frames):
            a = os.path.join(args.pred_frames, f"frame_{f:04d}.ppm")
            b = os.path.join(args.gt_frames, f"frame_{f:04d}.ppm")
            _require(a, b)
            psnrs.append(fit.psnr(particle_gs.read_ppm(a), particle_gs.read_ppm(b)))
    lines = ["frame\tchamfer_x1e4" + ("\tpsnr" if psnrs else "")]
    for f, c in enumerate(curve):
        lines.append(f"{f}\t{c:.6f}" + (f"\t{psnrs[f]:.4f}" if psnrs else ""))
    lines.append(f"mean\t{curve.mean():.6f}" + (f"\t{np.mean(psnrs):.4f}" if psnrs else ""))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
        _write_snapshot(os.path.dirname(os.path.abspath(args.out)), args)


def cmd_interp(args):
    cfg, particles, _, _ = _load_scene(args)
    base = _material(args.prior)
    _require(args.adapter)
    adapter = load_material_adapter(args.adapter)
    try:
        weights = [float(w) for w in args.weights.split(",") if w.strip()]
    except ValueError:
        raise InputError(f"bad --weights {args.weights!r}")
    trajs = fit.interpolate_dynamics(base, adapter, weights, particles, cfg, args.steps,
                                     args.save_every or cfg.substeps)
    os.makedirs(args.out, exist_ok=True)
    for w, t in zip(weights, trajs):
        t.save(os.path.join(args.out, f"interp_w{w:g}.nmtraj"))
    _write_snapshot(args.out, args)
    print(f"wrote {len(trajs)} trajectories to {args.out}")


# --------------------------------------------------------------------------
# parser


def _add_globals(p):
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="matground", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate a benchmark scene to produce ground truth")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset")
    src.add_argument("--scene")
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--save-every", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--camera")
    p.add_argument("--render", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="fit a neural prior to an analytic material")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--target", help="material JSON to imitate")
    src.add_argument("--preset", help="use a catalog entry's material")
    p.add_argument("--samples", type=int, default=50_000)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fit", help="fit an adapter to ground-truth observations")
    p.add_argument("--scene")
    p.add_argument("--prior")
    p.add_argument("--gt", help="ground-truth trajectory (NMTRAJ1)")
    p.add_argument("--supervision", choices=("particles", "pixels"), default="particles")
    p.add_argument("--frames", help="directory of reference PPM frames (pixel supervision)")
    p.add_argument("--camera")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--horizon", type=int)
    p.add_argument("--checkpoint-every", type=int, default=diff.DEFAULT_CHECKPOINT_EVERY)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--alpha", type=float, default=16.0)
    p.add_argument("--ablation", choices=("none", "no-adapter", "no-bind"), default="none")
    p.add_argument("--fit-v0", action="store_true")
    p.add_argument("--v0-frames", type=int, default=5)
    p.add_argument("--v0-iterations", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sim", help="simulate a scene with a (composed) material")
    p.add_argument("--scene")
    p.add_argument("--material")
    p.add_argument("--adapter", help="directory holding adapter.*.nmlora")
    p.add_argument("--weight", type=float)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--save-every", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("render", help="render a trajectory to PPM frames")
    p.add_argument("--traj")
    p.add_argument("--camera")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-frame Chamfer (x1e4) and optional PSNR")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-frames")
    p.add_argument("--gt-frames")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interp", help="rollouts over a sweep of composition weights")
    p.add_argument("--scene")
    p.add_argument("--prior")
    p.add_argument("--adapter")
    p.add_argument("--weights", default="0,0.25,0.5,0.75,1")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--save-every", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interp)

    for p in sub.choices.values():
        _add_globals(p)
    return parser


REQUIRED = {
    "gen": ["out"], "pretrain": ["out"], "fit": ["scene", "prior", "gt", "out"],
    "sim": ["scene", "material", "out"], "render": ["traj", "out"], "eval": ["pred", "gt"],
    "interp": ["scene", "prior", "adapter", "out"],
}


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            parser.exit(EXIT_INPUT, f"matground: cannot read config: {err}\n")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = {k: v for k, v in values.items() if k in known and k not in ("config", "help")}
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    # checked after merging so a snapshot alone can supply every path
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command]
               if getattr(args, d) is None]
    if args.command == "pretrain" and args.target is None and args.preset is None:
        missing.append("--target or --preset")
    if missing:
        parser.exit(EXIT_INPUT, f"matground {args.command}: missing {', '.join(missing)}\n")
    return args


def _set_threads(n):
    # the kernels are serial; this only bounds numba's pool if something uses it
    import numba
    numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        args.func(args)
    except (InputError, CatalogError, FormatError, DomainError, GeometryError,
            CompositionError, FileNotFoundError, ValueError) as err:
        print(f"matground {args.command}: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, DifferentiationError, InversionError, FloatingPointError) as err:
        print(f"matground {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
