"""Command-line surface: synth | train | infer | fuse | eval | gradcheck.

Numpy-backed modules are imported lazily inside main() so the DSPM_THREADS
cap can be applied to the BLAS pool before numpy loads. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_cap():
    cap = os.environ.get("DSPM_THREADS", "")
    try:
        n = int(cap) if cap else 0
    except ValueError:
        n = 0
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _echo(config, seed):
    print(f"config: {config}", file=sys.stderr)
    print(f"seed: {seed}", file=sys.stderr)


def _build_parser():
    p = argparse.ArgumentParser(prog="dspm", description="Desk-scale PatchMatch multi-view stereo")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate synthetic scene datasets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scenes", type=int, default=1)
    sp.add_argument("--views", type=int, default=3)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=80)
    sp.add_argument("--baseline", type=float, default=1.2)
    sp.add_argument("--d-min", type=float, default=2.0)
    sp.add_argument("--d-max", type=float, default=6.0)

    tp = sub.add_parser("train", help="train on a directory of scenes")
    tp.add_argument("--data", required=True)
    tp.add_argument("--config", default=None, help="key=value config file")
    tp.add_argument("--out", required=True, help="checkpoint path")
    tp.add_argument("--steps", type=int, default=None, help="cap the step count")
    tp.add_argument("--loss-csv", default=None, help="CSV path (default: <out>.loss.csv)")
    tp.add_argument("--seed", type=int, default=None, help="override the config seed")

    ip = sub.add_parser("infer", help="estimate depth maps for one scene")
    ip.add_argument("--data", required=True, help="scene directory")
    ip.add_argument("--ckpt", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--seed", type=int, default=None)
    ip.add_argument("--dump-flow", action="store_true")
    ip.add_argument("--dump-uncertainty", action="store_true")

    fp = sub.add_parser("fuse", help="fuse depth maps into a point cloud")
    fp.add_argument("--data", required=True, help="scene directory (cameras, images)")
    fp.add_argument("--depths", required=True, help="directory of per-view pfm depth maps")
    fp.add_argument("--out", required=True, help="output PLY path")
    fp.add_argument("--tau-px", type=float, default=1.0)
    fp.add_argument("--tau-rel", type=float, default=0.01)
    fp.add_argument("--n-consist", type=int, default=2)
    fp.add_argument("--seed", type=int, default=0)

    ep = sub.add_parser("eval", help="depth and point-cloud metrics vs ground truth")
    ep.add_argument("--data", required=True)
    ep.add_argument("--depths", required=True)
    ep.add_argument("--json", action="store_true")
    ep.add_argument("--tau-px", type=float, default=1.0)
    ep.add_argument("--tau-rel", type=float, default=0.01)
    ep.add_argument("--n-consist", type=int, default=2)
    ep.add_argument("--seed", type=int, default=0)

    gp = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--instances", type=int, default=5)
    gp.add_argument("--inject-fault", action="store_true",
                    help="test hook: deliberately corrupt one gradient")
    return p


def _cmd_synth(args):
    from . import synthscene as syn

    _echo(f"scenes={args.scenes} views={args.views} size={args.height}x{args.width} "
          f"baseline={args.baseline} depth=[{args.d_min},{args.d_max}]", args.seed)
    for k in range(args.scenes):
        spec = syn.SceneSpec(seed=args.seed + k, n_views=args.views, height=args.height,
                             width=args.width, baseline=args.baseline,
                             d_min=args.d_min, d_max=args.d_max)
        records = syn.generate_scene(spec)
        scene_dir = os.path.join(args.out, f"scene_{k:04d}")
        syn.write_dataset(records, scene_dir)
        print(f"wrote {scene_dir} ({len(records)} views)", file=sys.stderr)
    return 0


def _scene_dirs(root):
    subs = sorted(d for d in os.listdir(root) if d.startswith("scene_")
                  and os.path.isdir(os.path.join(root, d)))
    if subs:
        return [os.path.join(root, d) for d in subs]
    return [root]


def _cmd_train(args):
    from . import solver, synthscene as syn

    config = solver.parse_config_file(args.config) if args.config else solver.SolverConfig()
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    _echo(solver.format_config(config), config.seed)
    scenes = [syn.read_dataset(d) for d in _scene_dirs(args.data)]
    csv_path = args.loss_csv or (args.out + ".loss.csv")
    print("step,L_depth,L_NLL,L_total")
    history, _ = solver.train(scenes, config, args.out, csv_path=csv_path,
                              max_steps=args.steps, log=print)
    print(f"checkpoint: {args.out}", file=sys.stderr)
    print(f"loss csv: {csv_path}", file=sys.stderr)
    return 0


def _cmd_infer(args):
    import numpy as np

    from . import pfm, solver, synthscene as syn

    nets, config = solver.load_checkpoint(args.ckpt)
    seed = config.seed if args.seed is None else args.seed
    _echo(solver.format_config(config), seed)
    records = syn.read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    results = solver.infer_views(records, config, nets, seed=seed)
    for i, res in enumerate(results):
        pfm.write_pfm(os.path.join(args.out, f"{i:08d}.pfm"), res.depth)
        if args.dump_uncertainty:
            for v, vm in enumerate(res.scales[-1].views):
                pfm.write_pfm(os.path.join(args.out, f"{i:08d}_uncertainty_{v}.pfm"), vm.u.data)
        if args.dump_flow:
            flow = res.flows[-1].data
            for k in range(flow.shape[0] // 2):
                rgb = np.stack([flow[2 * k], flow[2 * k + 1], np.zeros_like(flow[0])], axis=-1)
                pfm.write_pfm(os.path.join(args.out, f"{i:08d}_flow_{k:02d}.pfm"), rgb)
        print(f"view {i}: depth in [{res.depth.min():.4f}, {res.depth.max():.4f}]", file=sys.stderr)
    return 0


def _load_predictions(depths_dir, n):
    from . import pfm

    return [pfm.read_pfm(os.path.join(depths_dir, f"{i:08d}.pfm")) for i in range(n)]


def _cmd_fuse(args):
    from . import fusion, synthscene as syn

    _echo(f"tau_px={args.tau_px} tau_rel={args.tau_rel} n_consist={args.n_consist}", args.seed)
    records = syn.read_dataset(args.data)
    depths = _load_predictions(args.depths, len(records))
    cloud = fusion.fuse(depths, [r.camera for r in records],
                        images=[r.image for r in records],
                        tau_px=args.tau_px, tau_rel=args.tau_rel, n_consist=args.n_consist)
    fusion.write_ply(args.out, cloud)
    print(f"wrote {args.out} ({len(cloud.points)} points)", file=sys.stderr)
    return 0


def _cmd_eval(args):
    import numpy as np

    from . import fusion, synthscene as syn

    _echo(f"tau_px={args.tau_px} tau_rel={args.tau_rel} n_consist={args.n_consist}", args.seed)
    records = syn.read_dataset(args.data)
    depths = _load_predictions(args.depths, len(records))
    maes = []
    for rec, d in zip(records, depths):
        mask = rec.depth_gt > 0
        maes.append(fusion.depth_metrics(d, rec.depth_gt, mask)["mae"])
    cloud = fusion.fuse(depths, [r.camera for r in records],
                        tau_px=args.tau_px, tau_rel=args.tau_rel, n_consist=args.n_consist)
    gt_samples = fusion.backproject_ground_truth(records)
    cm = fusion.cloud_metrics(cloud.points, gt_samples)
    out = {"mae": float(np.mean(maes)), "acc": cm["acc"], "comp": cm["comp"],
           "overall": cm["overall"]}
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"{'metric':<10}{'value':>12}")
        for k in ("mae", "acc", "comp", "overall"):
            print(f"{k:<10}{out[k]:>12.6f}")
    return 0


def _cmd_gradcheck(args):
    from . import diffcore as dc

    _echo(f"instances={args.instances} inject_fault={args.inject_fault}", args.seed)
    dc._FAULT_INJECTION = bool(args.inject_fault)
    try:
        rows = dc.gradcheck_suite(seed=args.seed, instances=args.instances)
    finally:
        dc._FAULT_INJECTION = False
    failed = 0
    for name, err, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<22} max_rel_err={err:.3e}")
        failed += 0 if ok else 1
    print(f"{len(rows) - failed}/{len(rows)} primitives passed", file=sys.stderr)
    return 1 if failed else 0


def main(argv=None):
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "infer": _cmd_infer,
        "fuse": _cmd_fuse,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failures -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
