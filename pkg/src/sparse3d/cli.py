"""Command-line entry point.

Subcommands: gen-data, train, reconstruct, eval, render. Every command is
deterministic given (config, seed); seeds are explicit (no wall-clock
defaults) and the resolved configuration is written into the output
directory. Exit codes: 0 success, 2 validation error, 3 runtime divergence,
4 I/O failure. SPARSE3D_THREADS caps torch worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch
from PIL import Image

from .diffusion import (
    CategoryDenoiser,
    ConditionalDenoiser,
    NoiseSchedule,
    SmallUNet,
    UNetConfig,
    load_denoiser,
    save_denoiser,
    train_base,
    train_joint,
)
from .distill import DistillationConfig, reconstruct, render_camera, write_reports
from .epipolar import FeatureRenderer, FeatureRendererConfig, load_renderer, save_renderer
from .errors import DivergenceDetected, EmptyField, IoFailure, SchemaMismatch, ValidationError
from .field import HashGridConfig, RadianceField, load_field, save_field
from .meshmetrics import (
    MetricReport,
    chamfer,
    export_obj,
    fscore,
    marching_cubes,
    psnr,
    sample_mesh_points,
    ssim,
)
from .scenes import (
    Dataset,
    downsample_view,
    generate_dataset,
    load_dataset,
    make_scene,
    orbit_cameras,
    save_dataset,
    sdf_surface_points,
)

SCENE_PRESETS = {
    "sphere": {
        "category_id": 0,
        "seed": 11,
        "primitives": [{
            "kind": "sphere", "radius": 0.9, "center": [0, 0, 0],
            "color": [0.82, 0.28, 0.2], "color2": [0.92, 0.85, 0.38],
            "pattern": "checker", "pattern_scale": 3.5,
        }],
    },
    "box": {
        "category_id": 1,
        "seed": 12,
        "primitives": [{
            "kind": "box", "half_extents": [0.62, 0.55, 0.5], "center": [0, 0, 0],
            "rotation_euler_deg": [0, 0, 25],
            "color": [0.2, 0.45, 0.85], "color2": [0.9, 0.9, 0.9],
            "pattern": "stripes", "pattern_scale": 4.0,
        }],
    },
    "sphere_box": {
        "category_id": 2,
        "seed": 13,
        "primitives": [
            {"kind": "sphere", "radius": 0.62, "center": [-0.38, 0.05, 0.1],
             "color": [0.85, 0.3, 0.2], "color2": [0.95, 0.85, 0.35],
             "pattern": "checker", "pattern_scale": 4.0},
            {"kind": "box", "half_extents": [0.42, 0.38, 0.45],
             "center": [0.42, -0.05, -0.08], "rotation_euler_deg": [0, 0, -20],
             "color": [0.2, 0.5, 0.8], "color2": [0.9, 0.9, 0.92],
             "pattern": "stripes", "pattern_scale": 4.5},
        ],
    },
}


def load_scene_spec(name_or_path: str) -> dict:
    if name_or_path in SCENE_PRESETS:
        return SCENE_PRESETS[name_or_path]
    if not os.path.exists(name_or_path):
        raise ValidationError(f"unknown scene preset or missing file: {name_or_path}")
    with open(name_or_path) as f:
        return json.load(f)


def _setup_threads() -> None:
    n = os.environ.get("SPARSE3D_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _write_config(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _save_png(path: str, rgb01: np.ndarray) -> None:
    arr = np.clip(np.round(rgb01 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ----------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    spec = load_scene_spec(args.scene)
    scene = make_scene(spec)
    ds = generate_dataset(scene, args.views, orbit_radius=args.radius,
                          elevation_deg=args.elevation, resolution=args.resolution,
                          seed=args.seed)
    save_dataset(ds, args.out)
    _write_config(args.out, {"command": "gen-data", "scene": spec, "views": args.views,
                             "radius": args.radius, "elevation": args.elevation,
                             "resolution": args.resolution, "seed": args.seed})
    print(f"wrote {args.views} views at {args.resolution}x{args.resolution} "
          f"(s={ds.scale_s:.3f}, category={ds.category_id}) to {args.out}")
    return 0


def _pool_images(datasets: list) -> tuple[list, list]:
    images, cats = [], []
    for ds in datasets:
        for view in ds.views:
            rgb, _, _ = downsample_view(view, 32)
            images.append(rgb)
            cats.append(ds.category_id)
    return images, cats


def cmd_train(args) -> int:
    datasets = [load_dataset(d) for d in args.data]
    pool = [load_dataset(d) for d in args.pool] if args.pool else datasets
    n_categories = max(max(d.category_id for d in datasets),
                       max(d.category_id for d in pool)) + 1
    schedule = NoiseSchedule()
    os.makedirs(args.out, exist_ok=True)

    start_step, optimizer_state = 0, None
    if args.resume:
        renderer = load_renderer(os.path.join(args.resume, "renderer.ckpt"))
        denoiser = load_denoiser(os.path.join(args.resume, "denoiser.ckpt"))
        state = torch.load(os.path.join(args.resume, "train_state.pt"), weights_only=False)
        start_step, optimizer_state = state["step"], state["optimizer"]
        base = denoiser.base
    else:
        if args.base:
            base_model = load_denoiser(args.base)
            base = base_model.base if hasattr(base_model, "base") else base_model
        else:
            base = SmallUNet(UNetConfig(n_categories=n_categories, seed=args.seed))
            images, cats = _pool_images(pool)
            print(f"phase 0: pretraining base on {len(images)} pool images "
                  f"for {args.phase0_steps} steps", flush=True)
            train_base(base, images, cats, schedule, steps=args.phase0_steps,
                       seed=args.seed, log_every=max(1, args.phase0_steps // 5))
        renderer = FeatureRenderer(FeatureRendererConfig(seed=args.seed))
        denoiser = ConditionalDenoiser(base)
    save_denoiser(os.path.join(args.out, "base.ckpt"), CategoryDenoiser(base))

    stop = args.until if args.until else args.steps
    stats = train_joint(datasets, renderer, denoiser, schedule, steps=args.steps,
                        seed=args.seed, heldout=args.heldout,
                        start_step=start_step, stop_step=stop,
                        optimizer_state=optimizer_state, log_every=args.log_every)
    save_renderer(os.path.join(args.out, "renderer.ckpt"), renderer)
    save_denoiser(os.path.join(args.out, "denoiser.ckpt"), denoiser)
    torch.save({"step": stop, "optimizer": stats.pop("optimizer_state")},
               os.path.join(args.out, "train_state.pt"))
    with open(os.path.join(args.out, "losses.jsonl"), "w") as f:
        for i, (lf, ld) in enumerate(zip(stats["loss_feat"], stats["loss_diff"])):
            f.write(json.dumps({"step": start_step + i, "loss_feat": lf,
                                "loss_diff": ld}) + "\n")
    _write_config(args.out, {"command": "train", "data": args.data, "pool": args.pool,
                             "steps": args.steps, "phase0_steps": args.phase0_steps,
                             "heldout": args.heldout, "seed": args.seed,
                             "n_categories": n_categories})
    print(f"final losses: feat {np.mean(stats['loss_feat'][-50:]):.4f} "
          f"diff {np.mean(stats['loss_diff'][-50:]):.4f} "
          f"(dropout steps: {stats['dropout_steps']})")
    return 0


def cmd_reconstruct(args) -> int:
    dataset = load_dataset(args.data)
    if args.views < 2 or args.views > len(dataset.views):
        raise ValidationError(f"--views must be in [2, {len(dataset.views)}]")
    subset = Dataset(views=dataset.views[:args.views], scale_s=dataset.scale_s,
                     category_id=dataset.category_id)
    renderer = load_renderer(os.path.join(args.run, "renderer.ckpt"))
    denoiser = load_denoiser(os.path.join(args.run, "denoiser.ckpt"))
    cat_model = CategoryDenoiser(denoiser.base)
    schedule = NoiseSchedule()
    field = RadianceField(HashGridConfig(), seed=args.seed)
    config = DistillationConfig(steps=args.steps, distill_mode=args.distill,
                                seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    _write_config(args.out, {"command": "reconstruct", "data": args.data,
                             "run": args.run, "views": args.views,
                             "distill": args.distill, "steps": args.steps,
                             "iso_level": args.iso, "seed": args.seed,
                             "scale_s": dataset.scale_s})
    field, reports = reconstruct(subset, renderer, denoiser, cat_model, field,
                                 schedule, config, log_every=args.log_every)
    save_field(os.path.join(args.out, "field.ckpt"), field)
    write_reports(os.path.join(args.out, "report.jsonl"), reports)

    cams = orbit_cameras(16, dataset.scale_s, 20.0, args.render_size)
    with torch.no_grad():
        for i, cam in enumerate(cams):
            out = render_camera(field, cam, n_samples=config.n_samples,
                                size=args.render_size)
            _save_png(os.path.join(args.out, f"render_{i:02}.png"), out["rgb"].numpy())
    try:
        mesh = marching_cubes(field, resolution=args.mc_resolution, iso_level=args.iso)
        export_obj(mesh, os.path.join(args.out, "mesh.obj"))
    except EmptyField:
        print("warning: no density crossed the iso level; mesh.obj is empty",
              file=sys.stderr)
        with open(os.path.join(args.out, "mesh.obj"), "w"):
            pass
    print(f"reconstruction done: {args.out} ({args.steps} steps, {args.distill})")
    return 0


def eval_views(field, dataset: Dataset, skip: int, n_samples: int = 512):
    """Render the field at held-out poses and score PSNR/SSIM per view."""
    rows = []
    with torch.no_grad():
        for i, view in enumerate(dataset.views[skip:], start=skip):
            size = view.rgb.shape[0]
            out = render_camera(field, view.pose, n_samples=n_samples, size=size)
            pred = out["rgb"].numpy()
            rows.append({"view": i, "psnr": psnr(pred, view.rgb),
                         "ssim": ssim(pred, view.rgb)})
    return rows


def eval_geometry(field, gt_points: np.ndarray, iso_level: float = 10.0,
                  resolution: int = 128, n_points: int = 10_000, seed: int = 0,
                  tau: float | None = None):
    mesh = marching_cubes(field, resolution=resolution, iso_level=iso_level)
    pred = sample_mesh_points(mesh, n_points, seed=seed)
    return {"chamfer": float(chamfer(pred, gt_points)),
            "fscore": float(fscore(pred, gt_points, tau=tau))}


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    field = load_field(os.path.join(args.run, "field.ckpt"))
    run_cfg_path = os.path.join(args.run, "config.json")
    skip = args.skip_views
    if skip < 0 and os.path.exists(run_cfg_path):
        with open(run_cfg_path) as f:
            skip = json.load(f).get("views", 0)
    skip = max(skip, 0)

    rows = eval_views(field, dataset, skip)
    report = MetricReport(per_view=rows)
    if rows:
        report.psnr = float(np.mean([r["psnr"] for r in rows]))
        report.ssim = float(np.mean([r["ssim"] for r in rows]))
    if args.scene:
        scene = make_scene(load_scene_spec(args.scene))
        gt_points = sdf_surface_points(scene, 10_000, seed=args.seed)
        geo = eval_geometry(field, gt_points, iso_level=args.iso, seed=args.seed)
        report.chamfer = geo["chamfer"]
        report.fscore = geo["fscore"]
    out_path = args.out or os.path.join(args.run, "metrics.json")
    with open(out_path, "w") as f:
        f.write(report.to_json() + "\n")
    print(f"{'view':>6} {'psnr':>8} {'ssim':>8}")
    for r in rows:
        print(f"{r['view']:>6} {r['psnr']:>8.2f} {r['ssim']:>8.4f}")
    print(f"mean psnr {report.psnr:.2f} ssim {report.ssim:.4f} "
          f"chamfer {report.chamfer:.4f} fscore {report.fscore:.4f}")
    return 0


def cmd_render(args) -> int:
    field = load_field(args.field)
    os.makedirs(args.out, exist_ok=True)
    cams = orbit_cameras(args.azimuths, args.radius, args.elevation, args.resolution)
    with torch.no_grad():
        for i, cam in enumerate(cams):
            out = render_camera(field, cam, n_samples=args.n_samples,
                                size=args.resolution)
            _save_png(os.path.join(args.out, f"render_{i:02}.png"), out["rgb"].numpy())
    print(f"wrote {args.azimuths} renders to {args.out}")
    return 0


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparse3d",
                                description="sparse-view 3D reconstruction at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--scene", required=True, help="preset name or scene-spec JSON path")
    g.add_argument("--views", type=int, default=12)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--radius", type=float, default=6.0)
    g.add_argument("--elevation", type=float, default=20.0)
    g.add_argument("--resolution", type=int, default=64)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="phase-0 base pretraining + joint training")
    t.add_argument("--data", nargs="+", required=True, help="training dataset dirs")
    t.add_argument("--pool", nargs="*", default=[], help="phase-0 pool dataset dirs")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--phase0-steps", type=int, default=2000)
    t.add_argument("--base", default=None, help="existing base checkpoint (skips phase 0)")
    t.add_argument("--heldout", type=int, default=0)
    t.add_argument("--resume", default=None, help="train dir to resume from")
    t.add_argument("--until", type=int, default=None,
                   help="stop after this step of the planned total (resumable)")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="optimize a radiance field by distillation")
    r.add_argument("--data", required=True)
    r.add_argument("--run", required=True, help="training output dir with checkpoints")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--views", type=int, default=2)
    r.add_argument("--distill", choices=("csds", "sds"), default="csds")
    r.add_argument("--steps", type=int, default=10000)
    r.add_argument("--iso", type=float, default=10.0)
    r.add_argument("--mc-resolution", type=int, default=128)
    r.add_argument("--render-size", type=int, default=64)
    r.add_argument("--log-every", type=int, default=0)
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("eval", help="PSNR/SSIM + chamfer/F-score of a reconstruction")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True, help="dataset dir with ground-truth views")
    e.add_argument("--scene", default=None, help="scene preset/spec for geometry GT")
    e.add_argument("--skip-views", type=int, default=-1,
                   help="held-out split starts here (default: input count from run config)")
    e.add_argument("--iso", type=float, default=10.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("render", help="turntable renders from a field checkpoint")
    v.add_argument("--field", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--azimuths", type=int, default=16)
    v.add_argument("--radius", type=float, default=6.0)
    v.add_argument("--elevation", type=float, default=20.0)
    v.add_argument("--resolution", type=int, default=64)
    v.add_argument("--n-samples", type=int, default=512)
    v.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ValidationError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except DivergenceDetected as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except (IoFailure, SchemaMismatch, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
