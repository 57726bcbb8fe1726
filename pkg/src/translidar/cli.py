"""Command-line surface: simulate, train, eval, mesh.

Exit codes: 0 success, 2 validation/domain error, 3 I/O error, 4 numerical
abort. All commands are deterministic under a fixed --seed and thread
layout (worker count capped by TRANSLIDAR_THREADS).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .dataset import (DatasetManifest, ExperimentConfig, PHOTON_LEVELS,
                      config_from_file, parse_scene_file, read_dataset,
                      ring_poses, scene_to_dicts, write_dataset)
from .errors import DomainError, TranslidarError
from .field import AnalyticSdf, load_field, sphere_trace_batch
from .geometry import pixel_directions
from .metrics import (chamfer_distance, extract_mesh, l1_depth_masked,
                      log_matched_depth_map, psnr, sample_mesh_points,
                      transient_iou, write_obj, write_ply)
from .optim import train
from .renderer import PulseKernel, RenderConfig, gaussian_pulse, render_view
from .sensor import (add_background, background_per_bin, sample_poisson,
                     scale_to_photon_level)

logger = logging.getLogger("translidar.cli")

BOUNDING_RADIUS = 1.5


# ---------------------------------------------------------------------------
# simulate

def _center_depths(fld, pose, near, far):
    W, H = pose.width, pose.height
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dirs = pixel_directions(pose, ii.ravel(), jj.ravel(),
                            np.full(ii.size, 0.5), np.full(ii.size, 0.5))
    origins = np.broadcast_to(pose.origin, dirs.shape)
    t, hit = sphere_trace_batch(fld, origins, dirs, near, far)
    return np.where(hit, t, np.nan).reshape(H, W)


def cmd_simulate(args):
    prims = parse_scene_file(args.scene)
    fld = AnalyticSdf(prims, bounding_radius=BOUNDING_RADIUS, s=args.sharpness)
    train_poses, held_poses = ring_poses(args.views, distance=args.distance,
                                         width=args.size, height=args.size,
                                         bounding_radius=BOUNDING_RADIUS)
    poses = train_poses + held_poses
    near = args.distance - BOUNDING_RADIUS
    far = args.distance + BOUNDING_RADIUS
    t0 = 2.0 * near
    bw = 2.0 * (far - near) / args.bins
    pulse = gaussian_pulse(7, 1.2)

    ss = np.random.SeedSequence(args.seed)
    children = ss.spawn(2 * len(poses))
    cfg = RenderConfig(n_samples=args.n_samples, n_bins=args.bins, bin_width=bw,
                       t0_offset=t0, near=near, far=far, n_sub=args.n_sub,
                       pulse=pulse, exposure_scale=1.0)
    cubes, masks, depths = [], [], []
    for i, pose in enumerate(poses):
        out = render_view(fld, pose, cfg, rng=np.random.default_rng(children[i]))
        cubes.append(out.transient)
        masks.append(out.intensity > 1e-9)
        depths.append(_center_depths(fld, pose, near, far))
        logger.info("rendered view %d/%d", i + 1, len(poses))

    if args.ppp == "raw-flux":
        k, b = 1.0, 0.0
        final = cubes
    else:
        target = float(args.ppp)
        k, scaled = scale_to_photon_level(cubes, masks, target)
        b = background_per_bin(target, args.bins)
        final = []
        for i, cube in enumerate(scaled):
            rates = add_background(cube, target)
            noise_rng = np.random.default_rng(children[len(poses) + i])
            counts = sample_poisson(rates.data, noise_rng)
            final.append(dataclasses.replace(cube, data=counts.astype(np.float64)))

    views = []
    for i, pose in enumerate(poses):
        views.append({"pose_file": f"pose_{i:02d}.json",
                      "transient_file": f"transient_{i:02d}.bin",
                      "mask_file": f"mask_{i:02d}.bin",
                      "split": "train" if i < len(train_poses) else "heldout"})
    manifest = DatasetManifest(scene=scene_to_dicts(prims), views=views,
                               bin_width=bw, n_bins=args.bins, t0_offset=t0,
                               near=near, far=far,
                               pulse_taps=[float(x) for x in pulse.taps],
                               photon_level=args.ppp, seed=args.seed,
                               exposure_scale=k, background_per_bin=b)
    write_dataset(manifest, final, masks, poses, args.out, oracle_depths=depths)
    print(f"wrote {len(poses)} views ({len(train_poses)} train) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args):
    cfg = config_from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    ds = read_dataset(args.data, with_oracle=False)
    _, metrics = train(ds, cfg, out_dir=args.out, resume=args.resume)
    if metrics:
        print(f"trained {cfg.total_steps} steps, final loss {metrics[-1]['loss']:.6g}")
    else:
        print("trained 0 steps (checkpoint written)")
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args):
    ds = read_dataset(args.data)
    held = [v for v in ds.views if v.split != "train"]
    if not held:
        raise DomainError("dataset has no held-out views to evaluate")
    fld, step = load_field(args.checkpoint)
    man = ds.manifest
    pulse = PulseKernel(np.asarray(man.pulse_taps, dtype=np.float64))
    n_samples = args.n_samples if args.n_samples else man.n_bins
    cfg = RenderConfig(n_samples=n_samples, n_bins=man.n_bins,
                       bin_width=man.bin_width, t0_offset=man.t0_offset,
                       near=man.near, far=man.far, n_sub=args.n_sub,
                       pulse=pulse, exposure_scale=man.exposure_scale)

    ious, psnrs, depth_errs, oracle_errs, covered = [], [], [], [], []
    for v in held:
        out = render_view(fld, v.pose, cfg, rng=None)
        rendered = out.transient.data
        measured = v.transient.data
        mask = v.mask
        m_rend = rendered[mask].sum() / max(1, mask.sum())
        m_meas = measured[mask].sum() / max(1, mask.sum())
        scale = m_meas / m_rend if m_rend > 0 else 1.0
        rendered = rendered * scale
        ious.append(transient_iou(rendered, measured))
        ref_int = measured.sum(axis=-1)
        peak = float(ref_int.max()) if ref_int.max() > 0 else 1.0
        psnrs.append(psnr(rendered.sum(axis=-1), ref_int, peak))
        mf_depth, mf_valid = log_matched_depth_map(measured, pulse,
                                                   man.bin_width, man.t0_offset)
        fin = np.isfinite(out.depth)
        covered.append(float((mask & fin).sum()) / max(1, mask.sum()))
        err = l1_depth_masked(out.depth, mf_depth, mask & mf_valid & fin)
        if not np.isnan(err):
            depth_errs.append(err)
        if v.oracle_depth is not None:
            omask = mask & np.isfinite(v.oracle_depth) & fin
            oerr = l1_depth_masked(out.depth, np.nan_to_num(v.oracle_depth), omask)
            if not np.isnan(oerr):
                oracle_errs.append(oerr)

    report = {"checkpoint_step": step,
              "n_heldout_views": len(held),
              "photon_level": man.photon_level,
              "transient_iou": float(np.mean(ious)),
              "psnr_db": float(np.mean(psnrs)),
              "depth_l1": float(np.mean(depth_errs)) if depth_errs else None,
              "oracle_depth_l1": float(np.mean(oracle_errs)) if oracle_errs else None,
              "depth_coverage": float(np.mean(covered))}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    width = max(len(k) for k in report)
    for key in sorted(report):
        print(f"{key:<{width}}  {report[key]}")
    return 0


# ---------------------------------------------------------------------------
# mesh

def cmd_mesh(args):
    fld, _ = load_field(args.checkpoint)
    mesh = extract_mesh(fld, args.resolution, iso=args.iso)
    if mesh.is_empty:
        print("field has no zero crossing: empty mesh", file=sys.stderr)
        return 2
    write_ply(mesh, args.out + ".ply")
    write_obj(mesh, args.out + ".obj")
    print(f"wrote {args.out}.ply / .obj "
          f"({len(mesh.vertices)} vertices, {len(mesh.triangles)} faces)")
    if args.reference:
        prims = parse_scene_file(args.reference)
        ref_field = AnalyticSdf(prims, bounding_radius=BOUNDING_RADIUS)
        ref_mesh = extract_mesh(ref_field, max(args.resolution, 160))
        r1, r2 = (np.random.default_rng(s)
                  for s in np.random.SeedSequence(args.seed).spawn(2))
        pa = sample_mesh_points(mesh, args.ref_samples, r1)
        pb = sample_mesh_points(ref_mesh, args.ref_samples, r2)
        cd = chamfer_distance(pa, pb)
        print(f"chamfer vs reference: {cd:.6g}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="translidar",
                                description="Transient lidar simulation and "
                                            "SDF reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a scene into a transient dataset")
    s.add_argument("scene", help="scene spec file (one primitive per line)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--views", type=int, default=5, help="training view count")
    s.add_argument("--ppp", default="raw-flux", choices=PHOTON_LEVELS,
                   help="photon level label")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32, help="image side in pixels")
    s.add_argument("--bins", type=int, default=96, help="time bins")
    s.add_argument("--distance", type=float, default=4.0, help="camera ring radius")
    s.add_argument("--n-sub", type=int, default=4, help="sub-rays per pixel")
    s.add_argument("--n-samples", type=int, default=128, help="march samples per ray")
    s.add_argument("--sharpness", type=float, default=300.0,
                   help="density sharpness of the analytic field")
    s.set_defaults(fn=cmd_simulate)

    t = sub.add_parser("train", help="fit a field to a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--seed", type=int, help="override seed")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on held-out views")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--n-samples", type=int, default=0,
                   help="march samples (default: one per bin)")
    e.add_argument("--n-sub", type=int, default=2)
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("mesh", help="extract the zero level set")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True, help="output path prefix")
    m.add_argument("--resolution", type=int, default=128)
    m.add_argument("--iso", type=float, default=0.0)
    m.add_argument("--reference", help="scene spec to compare against")
    m.add_argument("--ref-samples", type=int, default=100000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_mesh)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TranslidarError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
