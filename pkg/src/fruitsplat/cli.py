"""``fruitsplat`` command line: one subcommand per pipeline stage.

Exit status is 0 on success, 1 when a stage fails (the message names the
stage) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .colmap import ModelFormat, parse_colmap_model, write_colmap_model
from .config import ConfigError, DataConfig, PipelineConfig, load_config, with_overrides
from .damage import analyze_plys, read_stiffness_csv, summarize_stiffness
from .dataset import (
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_dataset,
    read_image,
    synthetic_sparse_points,
    write_image,
    write_mask,
)
from .gaussians import export_ply, import_ply, init_from_points
from .rasterizer import RenderConfig, psnr, render
from .tactile import ContactConfig, TactileFrame, calibrate_tau, contact_energy, detect_contact
from .trainer import LossBreakdown, TrainConfig, save_checkpoint, train, write_loss_csv

logger = logging.getLogger("fruitsplat")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str):
    """Tag any failure inside the block with the pipeline stage it came from."""
    try:
        yield
    except StageError:
        raise
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        raise StageError(name, exc) from exc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _format_losses(lb: LossBreakdown) -> str:
    return (f"l1={lb.l1:.6f} dssim={lb.dssim:.6f} bce_s={lb.bce_strawberry:.6f} "
            f"bce_b={lb.bce_bruise:.6f} total={lb.total:.6f}")


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    with stage("synth spec"):
        kwargs = dict(n_gaussians=args.n_gaussians, n_cameras=args.n_cameras, image_size=args.image_size,
                      seed=args.seed, n_background=args.n_background)
        if args.bruise_fraction is not None:
            kwargs["bruise_patch_angle"] = SyntheticSceneSpec.angle_for_fraction(args.bruise_fraction)
        spec = SyntheticSceneSpec(**kwargs)
        if args.point_noise < 0:
            raise ValueError(f"point noise must be >= 0, got {args.point_noise}")
    out = Path(args.out)
    with stage("synth render"):
        cloud, samples, truth = generate_synthetic_scene(spec)
    with stage("synth write"):
        sparse, images = out / "sparse", out / "images"
        straw_dir, bruise_dir = out / "masks" / "strawberry", out / "masks" / "bruise"
        for d in (sparse, images, straw_dir, bruise_dir):
            d.mkdir(parents=True, exist_ok=True)
        points = synthetic_sparse_points(cloud, args.point_noise, spec.seed)
        write_colmap_model([s.frame for s in samples], points, sparse, ModelFormat.BINARY)
        for s in samples:
            write_image(images / s.frame.image_name, s.image)
            write_mask(straw_dir / s.frame.image_name, s.strawberry_mask)
            write_mask(bruise_dir / s.frame.image_name, s.bruise_mask)
        export_ply(cloud, out / "gt.ply")
        _write_json(out / "ground_truth.json", {
            "bruise_fraction": truth["bruise_fraction"],
            "strawberry_count": truth["strawberry_count"],
            "bruised_count": int(truth["is_bruised"].sum()),
            "point_noise": args.point_noise,
            "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        })
        cfg = PipelineConfig(
            data=DataConfig(sparse, images, straw_dir, bruise_dir),
            train=TrainConfig(seed=spec.seed),
            output_dir=out / "run",
        )
        (out / "config.json").write_text(cfg.to_json(relative_to=out), encoding="utf-8")
    print(f"wrote {len(samples)} frames, {len(cloud)} GT Gaussians, "
          f"bruise fraction {100 * truth['bruise_fraction']:.2f}% to {out}")
    return 0


# --------------------------------------------------------------------------- ingest


def cmd_ingest(args) -> int:
    with stage("ingest"):
        frames, points = parse_colmap_model(args.model, args.format)
    cams = {f.intrinsics for f in frames}
    print(f"model {args.model}: {len(frames)} frames, {len(cams)} cameras, {len(points)} points")
    for intr in sorted(cams, key=lambda c: (c.model.value, c.width, c.height, c.params())):
        print(f"  {intr.model.value} {intr.width}x{intr.height} params={list(intr.params())}")
    if args.images:
        with stage("dataset"):
            samples = load_dataset(args.model, args.images, args.strawberry_masks, args.bruise_masks)
        n_masked = sum(s.strawberry_mask is not None for s in samples)
        print(f"dataset: {len(samples)} samples loaded, {n_masked} with masks")
    if args.convert:
        with stage("ingest convert"):
            write_colmap_model(frames, points, args.convert, args.to)
        print(f"wrote {args.to} model to {args.convert}")
    return 0


# --------------------------------------------------------------------------- train


def _split(samples, every: int):
    if every <= 0:
        return list(samples), []
    train_set = [s for i, s in enumerate(samples) if i % every != 0]
    held = [s for i, s in enumerate(samples) if i % every == 0]
    if not train_set:
        raise ValueError(f"holdout_every={every} leaves no training frames")
    return train_set, held


def cmd_train(args) -> int:
    with stage("config"):
        cfg = with_overrides(load_config(args.config), steps=args.steps, seed=args.seed,
                             output_dir=args.output_dir, holdout_every=args.holdout_every)
        cfg.validate_paths()
    d = cfg.data
    with stage("ingest"):
        frames, points = parse_colmap_model(d.model_dir, d.format)
    with stage("dataset"):
        samples = load_dataset(d.model_dir, d.image_dir, d.strawberry_mask_dir, d.bruise_mask_dir,
                               threads=cfg.render.worker_count())
        train_set, held = _split(samples, cfg.holdout_every)
    with stage("init"):
        cloud = init_from_points(points, cfg.init.opacity, cfg.init.knn_k)

    t0 = time.perf_counter()
    log_every = max(1, cfg.train.steps // 20)

    def progress(step: int, lb: LossBreakdown) -> None:
        if step % log_every == 0 or step == cfg.train.steps:
            logger.info("step %d/%d %s", step, cfg.train.steps, _format_losses(lb))

    with stage("train"):
        trained, history = train(cloud, train_set, cfg.train, cfg.render, on_step=progress)
    elapsed = time.perf_counter() - t0

    out = cfg.output_dir
    with stage("write outputs"):
        (out / "renders").mkdir(parents=True, exist_ok=True)
        trained.metadata["source"] = "checkpoint"
        save_checkpoint(trained, out / "checkpoint.ply", cfg.train,
                        {"n_gaussians": len(trained), "train_frames": len(train_set),
                         "heldout_frames": len(held)})
        write_loss_csv(out / "losses.csv", history)
        scores = []
        for s in held:
            rendered = render(trained, s.frame, cfg.render)
            scores.append(psnr(rendered.color, s.image))
            stem = Path(s.frame.image_name).stem
            write_image(out / "renders" / f"{stem}.png", rendered.color)
            write_mask(out / "renders" / f"{stem}_strawberry.png", rendered.strawberry >= 0.5)
            write_mask(out / "renders" / f"{stem}_bruise.png", rendered.bruise >= 0.5)
        metrics = {"steps": cfg.train.steps, "n_gaussians": len(trained),
                   "final_losses": asdict(history[-1]),
                   "heldout_psnr": float(np.mean(scores)) if scores else None}
        _write_json(out / "metrics.json", metrics)

    print(f"final losses: {_format_losses(history[-1])}")
    if scores:
        print(f"held-out PSNR: {np.mean(scores):.2f} dB over {len(scores)} frames")
    else:
        train_psnr = float(np.mean([psnr(render(trained, s.frame, cfg.render).color, s.image) for s in train_set]))
        print(f"train PSNR: {train_psnr:.2f} dB (no held-out frames)")
    print(f"checkpoint: {out / 'checkpoint.ply'} ({len(trained)} Gaussians, {elapsed:.1f} s)")
    return 0


# --------------------------------------------------------------------------- render / export


def cmd_render(args) -> int:
    with stage("load checkpoint"):
        cloud = import_ply(args.checkpoint)
    with stage("ingest"):
        frames, _ = parse_colmap_model(args.model, args.format)
        if args.frames:
            wanted = set(args.frames)
            unknown = wanted - {f.frame_id for f in frames}
            if unknown:
                raise ValueError(f"unknown frame ids {sorted(unknown)}")
            frames = [f for f in frames if f.frame_id in wanted]
    with stage("render"):
        cfg = RenderConfig(background=tuple(args.background))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for f in frames:
            r = render(cloud, f, cfg)
            stem = Path(f.image_name).stem
            write_image(out / f"{stem}.png", r.color)
            write_image(out / f"{stem}_strawberry.png", np.repeat(r.strawberry[..., None], 3, axis=2))
            write_image(out / f"{stem}_bruise.png", np.repeat(r.bruise[..., None], 3, axis=2))
    print(f"rendered {len(frames)} frames to {out}")
    return 0


def cmd_export(args) -> int:
    with stage("load checkpoint"):
        cloud = import_ply(args.checkpoint)
    with stage("export"):
        if args.strawberry_threshold is not None:
            keep = cloud.strawberry_scores >= args.strawberry_threshold
            if not keep.any():
                raise ValueError(f"no strawberry points above threshold {args.strawberry_threshold}")
            cloud = cloud.subset(keep)
        export_ply(cloud, args.out, activated=not args.raw)
    print(f"exported {len(cloud)} Gaussians to {args.out} ({'logits' if args.raw else 'activated'})")
    return 0


# --------------------------------------------------------------------------- analysis


def _threshold(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {v}")
    return v


def cmd_analyze(args) -> int:
    with stage("analyze"):
        report = analyze_plys(args.pre, args.post, args.strawberry_threshold, args.bruise_threshold)
    print(report.table())
    if args.out:
        with stage("write report"):
            Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def cmd_stiffness(args) -> int:
    with stage("stiffness"):
        summaries = summarize_stiffness(read_stiffness_csv(args.csv))
    rows = [("fruit_id", "k_pre N/mm", "k_post N/mm", "retention %", "points")]
    for s in summaries:
        rows.append((s.fruit_id, f"{s.pre_k:.6g}", f"{s.post_k:.6g}", f"{s.retention_pct:.2f}",
                     f"{s.n_points_pre}/{s.n_points_post}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    if args.out:
        with stage("write report"):
            _write_json(Path(args.out), {"fruits": [asdict(s) for s in summaries]})
    return 0


def _tactile_frames(directory: str | Path, sensor_id: str) -> list[TactileFrame]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"frames directory {d} does not exist")
    paths = sorted(d.glob("*.png"))
    if not paths:
        raise ValueError(f"no PNG frames in {d}")
    return [TactileFrame(read_image(p), sensor_id, float(i)) for i, p in enumerate(paths)]


def cmd_contact(args) -> int:
    with stage("contact input"):
        ref = TactileFrame(read_image(Path(args.reference)), args.sensor_id)
        frames = _tactile_frames(args.frames, args.sensor_id)
        if args.calibrate:
            tau = calibrate_tau(_tactile_frames(args.calibrate, args.sensor_id), ref)
            logger.info("calibrated tau = %r", tau)
        else:
            tau = args.tau
        config = ContactConfig(tau, ref)
    with stage("contact"):
        rows = [(i, contact_energy(f, ref), detect_contact(f, config)) for i, f in enumerate(frames)]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("index", "energy", "contact_flag"))
        for i, e, flag in rows:
            writer.writerow((i, repr(e), int(flag)))
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.out:
        first = next((i for i, _, flag in rows if flag), None)
        print(f"tau={tau!r}; {sum(r[2] for r in rows)} of {len(rows)} frames in contact; first contact: {first}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fruitsplat", description="Semantic Gaussian splatting for fruit bruise analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic fruit scene with known bruising")
    s.add_argument("--out", required=True)
    s.add_argument("--bruise-fraction", type=float, default=None,
                   help="expected bruised share of the fruit surface (default: 60 degree cap)")
    s.add_argument("--n-gaussians", type=int, default=400)
    s.add_argument("--n-cameras", type=int, default=24)
    s.add_argument("--n-background", type=int, default=64)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--point-noise", type=float, default=5e-4, help="sparse point jitter in scene units")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="inspect, validate or convert a COLMAP model")
    s.add_argument("model")
    s.add_argument("--format", choices=["auto", "binary", "text"], default="auto")
    s.add_argument("--images")
    s.add_argument("--strawberry-masks")
    s.add_argument("--bruise-masks")
    s.add_argument("--convert", help="write the model to this directory")
    s.add_argument("--to", choices=["binary", "text"], default="binary")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="optimize a Gaussian cloud from a JSON config")
    s.add_argument("config")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    s.add_argument("--holdout-every", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render color and semantic channels of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--model", required=True, help="COLMAP model supplying the cameras")
    s.add_argument("--format", choices=["auto", "binary", "text"], default="auto")
    s.add_argument("--frames", type=int, nargs="*", help="frame ids (default: all)")
    s.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("export", help="export a checkpoint as a scored point cloud PLY")
    s.add_argument("checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--raw", action="store_true", help="keep logits instead of probabilities")
    s.add_argument("--strawberry-threshold", type=_threshold, help="drop Gaussians below this score")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("analyze", help="bruise percentage before and after manipulation")
    s.add_argument("pre")
    s.add_argument("post")
    s.add_argument("--strawberry-threshold", type=_threshold, default=0.5)
    s.add_argument("--bruise-threshold", type=_threshold, default=0.5)
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("stiffness", help="stiffness retention from probe forces")
    s.add_argument("csv")
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(func=cmd_stiffness)

    s = sub.add_parser("contact", help="contact energy and flag per tactile frame")
    s.add_argument("--frames", required=True, help="directory of PNG frames, processed in name order")
    s.add_argument("--reference", required=True, help="undeformed sensor PNG")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--tau", type=float)
    g.add_argument("--calibrate", help="directory of no-contact frames; tau = mean + 5 sigma")
    s.add_argument("--sensor-id", default="dt0")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_contact)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
