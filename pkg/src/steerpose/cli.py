"""Command-line entry point: ``steerpose <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import equivcheck, network, pose, scanloop, slicesim, synth, train, volio
from .errors import ConfigError, FormatError, ProtocolError, ValidationError


class CLIError(Exception):
    pass


def _load_cfg(args) -> dict:
    if args.config is None:
        return {"version": cfgmod.CONFIG_VERSION}
    return cfgmod.load_config(args.config)


def _require_seed(args):
    if args.seed is None:
        raise CLIError(f"{args.command} is stochastic: --seed is required")
    return args.seed


def _out_path(args, is_dir: bool = False) -> Path:
    if args.out is None:
        raise CLIError("--out is required")
    p = Path(args.out)
    if p.exists() and not args.force:
        if not is_dir or any(p.iterdir()):
            raise CLIError(f"{p} exists; pass --force to overwrite")
    if is_dir:
        p.mkdir(parents=True, exist_ok=True)
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_records(path: Path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _phantom_config(cfg) -> synth.PhantomConfig:
    g = lambda k: cfgmod.get(cfg, "phantom." + k)
    return synth.PhantomConfig(size=g("size"), voxel_size=g("voxel_size"),
                               asymmetry_strength=g("asymmetry_strength"),
                               random_pose=g("random_pose"), max_shift_mm=g("max_shift_mm"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_phantom(args):
    seed = _require_seed(args)
    cfg = _load_cfg(args)
    ph = synth.generate_phantom(seed, _phantom_config(cfg))
    out = _out_path(args, is_dir=True)
    volio.write_volume(out / "volume.vol", volio.Volume(ph.volume, ph.voxel_size, ph.affine))
    volio.write_volume(out / "mask.vol", volio.Volume(ph.occupancy.mask.astype(np.uint8), ph.voxel_size, ph.affine))
    pose.write_pose(out / "pose.txt", ph.gt_pose)
    meta = {"seed": seed, "eye_left_mm": ph.eye_left.tolist(), "eye_right_mm": ph.eye_right.tolist(),
            "asymmetry_strength": ph.asymmetry_strength}
    (out / "landmarks.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    print(f"wrote phantom to {out}")
    return 0


def _load_phantom_dir(d: Path):
    vol = volio.read_volume(d / "volume.vol")
    mask = volio.read_volume(d / "mask.vol").data.astype(bool)
    gt = pose.read_pose(d / "pose.txt")
    return vol, mask, gt


def cmd_augment(args):
    seed = _require_seed(args)
    src = Path(args.input)
    vol, mask, gt = _load_phantom_dir(src)
    data, rec = synth.augment(vol.data.astype(np.float64), seed, args.profile, vol.voxel_size[0], mask, gt)
    out = _out_path(args, is_dir=True)
    volio.write_volume(out / "volume.vol", volio.Volume(data, vol.voxel_size, vol.affine))
    new_mask = synth.rigid_resample(mask.astype(float), rec["scale"] * np.array(rec["rotation"]), rec["shift_mm"],
                                    vol.voxel_size[0], order=0) > 0.5
    volio.write_volume(out / "mask.vol", volio.Volume(new_mask.astype(np.uint8), vol.voxel_size, vol.affine))
    pose.write_pose(out / "pose.txt", pose.RigidPose(np.array(rec["gt_R"]), np.array(rec["gt_t_mm"])))
    _write_records(out / "record.jsonl", [rec])
    print(f"wrote augmented volume to {out}")
    return 0


def cmd_equiv_check(args):
    cfg = _load_cfg(args) if args.config else None
    if cfg is None:
        raise CLIError("equiv-check needs --config (a network spec)")
    seed = _require_seed(args)
    spec = cfgmod.network_spec(cfg)
    net = network.EquivariantNet(spec)
    w = net.init_params(seed)
    shape = synth.random_head_shape(np.random.default_rng(seed))
    x = train.render_input(shape, np.eye(3), spec.input_size)
    if args.inject_fault:
        name = equivcheck.inject_fault(net, args.fault_layer, seed)
        print(f"injected fault into {name}")
    rep = equivcheck.report(net, w, x, n_resampled=args.resampled, seed=seed)
    print(equivcheck.format_report(rep))
    if args.out:
        _write_records(_out_path(args), rep["rows"])
    return 0 if rep["ok"] else 1


def cmd_train(args):
    seed = _require_seed(args)
    cfg = _load_cfg(args)
    spec = cfgmod.network_spec(cfg)
    g = lambda k: cfgmod.get(cfg, "train." + k)
    tc = train.TrainConfig(steps=g("steps"), lr=g("lr"), momentum=g("momentum"), weight_decay=g("weight_decay"),
                           beta=g("beta"), grad_eps=g("grad_eps"), clip_norm=g("clip_norm"), seed=seed,
                           fill=g("fill"))
    net = network.EquivariantNet(spec)
    data = train.ToyDataset(g("n_phantoms"), seed=seed, size=spec.input_size,
                            asymmetry_strength=cfgmod.get(cfg, "phantom.asymmetry_strength"), fill=g("fill"))
    out = _out_path(args, is_dir=True)
    init = net.init_params(seed)
    e0 = train.evaluate(net, init, data)
    w, hist = train.train_toy(net, data, tc, params=init)
    e1 = train.evaluate(net, w, data)
    network.save_checkpoint(out / "checkpoint.bin", spec, w, seed)
    (out / "network.cfg").write_text(cfgmod.network_config_text(spec))
    _write_records(out / "history.jsonl", [{"step": s, "loss": v} for s, v in hist])
    summary = {"initial_mean_rot_error_rad": float(e0.mean()), "final_mean_rot_error_rad": float(e1.mean()),
               "steps": tc.steps, "seed": seed}
    _write_records(out / "summary.jsonl", [summary])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    data_dir = Path(args.data)
    dirs = sorted(p for p in data_dir.iterdir() if (p / "volume.vol").exists()) if data_dir.is_dir() else []
    if (data_dir / "volume.vol").exists():
        dirs = [data_dir]
    if not dirs:
        raise CLIError(f"no phantom directories under {data_dir}")
    estimator = None
    if not args.oracle:
        if args.checkpoint is None:
            raise CLIError("eval needs --checkpoint or --oracle")
        spec = cfgmod.network_spec(cfg)
        params, _, _ = network.load_checkpoint(args.checkpoint, spec)
        estimator = scanloop.NetworkEstimator(network.EquivariantNet(spec), params)
    records = []
    for d in dirs:
        vol, mask, gt = _load_phantom_dir(d)
        occ = pose.OccupancyGrid(mask, vol.affine)
        surface = gt.inverse().apply(pose.surface_points(occ))
        pred = gt if estimator is None else estimator(0, vol)
        m = pose.metrics(pred, gt, surface)
        m["case"] = d.name
        records.append(m)
    out = _out_path(args)
    _write_records(out, records)
    print(f"mean rot error {np.mean([r['rot_error_rad'] for r in records]):.4f} rad over {len(records)} cases")
    return 0


def cmd_simulate(args):
    seed = _require_seed(args)
    cfg = _load_cfg(args)
    g = lambda k: cfgmod.get(cfg, "sim." + k)
    profile = slicesim.MotionProfile((g("rot_min_deg"), g("rot_max_deg")), (g("trans_min_mm"), g("trans_max_mm")))
    shape = slicesim.simulation_shape(seed, g("brain_scale"))
    pts = slicesim.brain_points(shape)
    records = []
    for orient in g("orientations"):
        for s in range(seed, seed + g("n_seeds")):
            a = slicesim.simulate(shape, orient, s, "oracle", profile, pts)
            b = slicesim.simulate(shape, orient, s, "motion_blind", profile, pts)
            rec = {"orientation": orient, "seed": s, "n_slices": a["n_slices"]}
            for est, r in (("oracle", a), ("motion_blind", b)):
                for k in ("gap", "irregularity", "mean_obliqueness_deg", "mean_offset_mm", "n_fallback"):
                    rec[f"{est}.{k}"] = r[k]
            records.append(rec)
    out = _out_path(args)
    _write_records(out, records)
    worse = sum(r["oracle.gap"] > r["motion_blind.gap"] for r in records)
    print(f"{len(records)} records; adaptive gap above motion-blind gap in {worse}")
    return 0


def _scan_setup(args, cfg):
    g = lambda k: cfgmod.get(cfg, "scan." + k)
    seed = _require_seed(args)
    shape = slicesim.simulation_shape(seed, cfgmod.get(cfg, "sim.brain_scale"))
    traj = slicesim.synth_trajectory(seed, g("n_steps"), slicesim.MotionProfile(
        (cfgmod.get(cfg, "sim.rot_min_deg"), cfgmod.get(cfg, "sim.rot_max_deg")),
        (cfgmod.get(cfg, "sim.trans_min_mm"), cfgmod.get(cfg, "sim.trans_max_mm"))))
    plan = slicesim.plan_for_brain(g("orientation"), slicesim.brain_points(shape))
    sc = scanloop.ScannerConfig(size=g("size"), voxel_size=g("voxel_size"), spin_sigma=g("spin_sigma_mm"),
                                deadline=g("deadline_ms") / 1000.0)
    return shape, traj, plan, sc


def _estimator(args, cfg, traj):
    if args.estimator == "oracle":
        est = scanloop.OracleEstimator(traj)
    else:
        if args.checkpoint is None:
            raise CLIError("the network estimator needs --checkpoint")
        spec = cfgmod.network_spec(cfg)
        params, _, _ = network.load_checkpoint(args.checkpoint, spec)
        est = scanloop.NetworkEstimator(network.EquivariantNet(spec), params)
    if args.sleep_steps:
        steps = [int(s) for s in args.sleep_steps.split(",")]
        est = scanloop.SleepyEstimator(est, args.sleep_s, steps)
    return est


def cmd_serve(args):
    cfg = _load_cfg(args)
    shape, traj, plan, sc = _scan_setup(args, cfg)
    est = _estimator(args, cfg, traj)
    scanloop.serve(args.endpoint, est, plan, sc.deadline,
                   ready=lambda addr: print(f"listening on {addr}", flush=True))
    return 0


def cmd_mock_scan(args):
    cfg = _load_cfg(args)
    shape, traj, plan, sc = _scan_setup(args, cfg)
    out = _out_path(args)
    timing = out.with_name(out.name + ".timing")
    with open(timing, "w") as log:
        if args.endpoint == "loopback":
            recs = scanloop.run_loopback(_estimator(args, cfg, traj), shape, traj, plan, sc, log)
        else:
            import socket
            family, addr = scanloop.parse_endpoint(args.endpoint)
            with socket.socket(family, socket.SOCK_STREAM) as s:
                s.connect(addr)
                recs = scanloop.mock_scan(s, shape, traj, plan, sc, log)
    out.write_text(scanloop.deterministic_view(recs))
    n_fb = sum(r["status"] != "ok" for r in recs)
    worst = max((r.get("compute_ms", 0.0) for r in recs), default=0.0)
    print(f"{len(recs)} replies, {n_fb} fallback/error, max compute {worst:.1f} ms")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration")
    common.add_argument("--seed", type=int, help="RNG seed (required by stochastic subcommands)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="steerpose", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-phantom", parents=[common], help="render a synthetic head phantom")
    sp.set_defaults(func=cmd_gen_phantom)

    sp = sub.add_parser("augment", parents=[common], help="augment a phantom directory")
    sp.add_argument("--input", required=True)
    sp.add_argument("--profile", default="regressor", choices=sorted(synth.PROFILES))
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("equiv-check", parents=[common], help="per-layer equivariance residuals")
    sp.add_argument("--inject-fault", action="store_true", help="corrupt a kernel (test only)")
    sp.add_argument("--fault-layer", default=None)
    sp.add_argument("--resampled", type=int, default=2, help="random non-grid rotations to report")
    sp.set_defaults(func=cmd_equiv_check)

    sp = sub.add_parser("train", parents=[common], help="toy training run")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="pose metrics on phantom directories")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true", help="use ground-truth poses as predictions")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("simulate-stacks", parents=[common], help="oracle vs motion-blind slice coverage")
    sp.set_defaults(func=cmd_simulate)

    for name, func in (("serve", cmd_serve), ("mock-scan", cmd_mock_scan)):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--endpoint", default="loopback" if name == "mock-scan" else "127.0.0.1:0",
                        help="host:port or unix socket path ('loopback' runs the server in-process)")
        sp.add_argument("--estimator", default="oracle", choices=["oracle", "network"])
        sp.add_argument("--checkpoint")
        sp.add_argument("--sleep-steps", default=None, help="comma-separated steps to delay (deadline test)")
        sp.add_argument("--sleep-s", type=float, default=2.0)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, FormatError, ValidationError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
