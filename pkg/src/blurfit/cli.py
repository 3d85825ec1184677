"""Command-line pipeline: synth, fit, tsr, eval, render.

Every command writes a manifest.json (command, config snapshot, inputs,
outputs, seed, timestamp, version) into the output directory before any
other artifact. Logging goes to stderr; machine-readable outputs go to
files only. Exit codes: 0 ok, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__, eval as eval_mod, fit as fit_mod, imgio, masks as masks_mod
from . import motion as motion_mod
from .eval import SyntheticScene
from .fit import FitConfig, FitDivergenceError
from .formation import make_video, render_tsr, render_window
from .geometry import Prototype, export_obj, import_obj
from .masks import MaskTrack, background_subtraction_masks, load_mask_track
from .renderer import Camera, default_camera

log = logging.getLogger("blurfit")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# config & manifest plumbing


def load_config_file(path: str | Path) -> dict:
    """Parse a key=value config file mirroring FitConfig fields."""
    values: dict = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{ln}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def _coerce(field_type, raw: str):
    if field_type is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return field_type(raw)


def build_config(file_values: dict, args: argparse.Namespace) -> FitConfig:
    """Config file values first, CLI flags override."""
    kwargs: dict = {}
    fields = {f.name: f for f in dataclasses.fields(FitConfig)}
    for key, raw in file_values.items():
        if key not in fields:
            raise InputError(f"unknown config key: {key}")
        if key == "prototypes":
            kwargs[key] = tuple(Prototype(p.strip()) for p in raw.split(","))
        elif key == "fit_width" or key == "screen_iters":
            kwargs[key] = None if raw.lower() == "none" else int(raw)
        elif key == "dtype":
            kwargs[key] = raw
        else:
            ftype = type(getattr(FitConfig(), key))
            kwargs[key] = _coerce(ftype, raw)
    overrides = {
        "seed": args.seed,
        "window": getattr(args, "window", None),
        "subframes": getattr(args, "subframes", None),
    }
    for key, val in overrides.items():
        if val is not None:
            kwargs[key] = val
    if getattr(args, "prototype", None):
        kwargs["prototypes"] = tuple(
            Prototype(p) for p in args.prototype.split(",")
        )
    return FitConfig(**kwargs)


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: dict, outputs: list[str], seed: int | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n"
    )


def _config_snapshot(config: FitConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["prototypes"] = [p.value for p in config.prototypes]
    return doc


# --------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    scene = eval_mod.synth_generate(
        seed=args.seed if args.seed is not None else 0,
        rotation_cap=args.rotation_cap,
        n_frames=args.frames,
        width=args.width,
        subframes=args.subframes or 8,
        bounce=args.bounce,
    )
    write_manifest(
        out, "synth",
        {"rotation_cap": args.rotation_cap, "frames": args.frames,
         "width": args.width, "bounce": args.bounce},
        {}, ["frames/", "masks/", "highspeed/", "gt/", "gt.json"],
        args.seed,
    )
    save_scene(out, scene)
    log.info("synthetic scene written to %s", out)
    return EXIT_OK


def save_scene(out: Path, scene: SyntheticScene) -> None:
    imgio.save_frames(out / "frames", scene.frames)
    masks_mod.save_mask_track(out / "masks", scene.mask_track)
    imgio.save_frames(out / "highspeed", scene.highspeed)
    gt_dir = out / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    export_obj(scene.mesh, gt_dir / "mesh.obj")
    motion_mod.save_motion(
        gt_dir / "motion.json", scene.motion, scene.exposure, scene.n_frames
    )
    imgio.save_image(gt_dir / "background.png", scene.background)
    doc = {
        "seed": scene.seed,
        "rotation_cap": scene.rotation_cap,
        "prototype": scene.prototype.value,
        "object_size": scene.size,
        "epsilon": scene.epsilon,
        "knot_time": scene.knot_time,
        "bounce": scene.bounce,
        "n_frames": scene.n_frames,
        "subframes": scene.mask_track.subframes,
        "camera": dataclasses.asdict(scene.camera),
    }
    (out / "gt.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_camera(doc: dict | None, width: int, height: int) -> Camera:
    if doc is None:
        return default_camera(width, height)
    return Camera(**doc)


def cmd_fit(args: argparse.Namespace) -> int:
    frames_dir = Path(args.frames)
    out = Path(args.out)
    frames = imgio.load_frames(frames_dir)
    video = make_video(frames)
    file_values = load_config_file(args.config) if args.config else {}
    config = build_config(file_values, args)

    if args.masks:
        track = load_mask_track(Path(args.masks))
        track = masks_mod.synchronize_direction(track)
    else:
        log.info("no mask track given; using background-subtraction fallback")
        track = background_subtraction_masks(video.frames, video.background)
    if track.n_frames != video.n_frames:
        raise InputError(
            f"mask track covers {track.n_frames} frames, video has "
            f"{video.n_frames}"
        )

    camera = default_camera(frames.shape[2], frames.shape[1])
    write_manifest(
        out, "fit", _config_snapshot(config),
        {"frames": str(frames_dir), "masks": args.masks},
        ["windows/", "motion.json", "mesh.obj", "loss.csv", "rendered/",
         "background.png"],
        config.seed,
    )
    imgio.save_image(out / "background.png", video.background)

    result = fit_mod.fit_video(
        video, track, config, camera, jobs=args.jobs or 1
    )
    for i, (start, res) in enumerate(result.windows):
        fit_mod.save_fit_result(out / "windows" / f"window_{start + 1:04d}", res)
    # Primary outputs: the best window per the whole-video video loss.
    best = min(
        range(len(result.windows)),
        key=lambda i: result.windows[i][1].final_video_loss,
    )
    best_res = result.windows[best][1]
    fit_mod.save_fit_result(out, best_res)
    (out / "frame_windows.json").write_text(
        json.dumps(
            {
                "frame_choice": result.frame_choice,
                "window_starts": [s for s, _ in result.windows],
                "per_frame_video_loss": [
                    r.per_frame_video_loss for _, r in result.windows
                ],
                "best_window": best,
            },
            indent=2, sort_keys=True,
        )
        + "\n"
    )

    # Re-render the input frames from the fitted model at input resolution.
    with torch.no_grad():
        cam = best_res.camera.scaled(frames.shape[2], frames.shape[1])
        rendered, _ = render_window(
            best_res.mesh, best_res.motion, best_res.exposure.epsilon,
            video.n_frames, cam, video.background.to(best_res.mesh.dtype),
            subframes=config.subframes, softness=config.softness,
        )
    imgio.save_frames(out / "rendered", rendered)
    log.info("fit written to %s (best window %d)", out, best + 1)
    return EXIT_OK


def cmd_tsr(args: argparse.Namespace) -> int:
    fit_dir = Path(args.fit)
    out = Path(args.out)
    mesh, motion, exposure, n_frames, camera, background = _load_fit_dir(fit_dir)
    write_manifest(
        out, "tsr", {"factor": args.factor}, {"fit": str(fit_dir)},
        ["frames/"], None,
    )
    with torch.no_grad():
        frames = render_tsr(
            mesh, motion, exposure.epsilon, args.factor, n_frames, camera,
            background,
        )
    imgio.save_frames(out / "frames", frames)
    log.info("%d TSR frames written to %s", frames.shape[0], out / "frames")
    return EXIT_OK


def _load_fit_dir(fit_dir: Path):
    if not fit_dir.is_dir():
        raise InputError(f"fit directory not found: {fit_dir}")
    mesh_path = fit_dir / "mesh.obj"
    motion_path = fit_dir / "motion.json"
    if not mesh_path.exists() or not motion_path.exists():
        raise InputError(f"no fit result (mesh.obj / motion.json) in {fit_dir}")
    mesh = import_obj(mesh_path)
    motion, exposure, n_frames = motion_mod.load_motion(motion_path)
    bg_path = fit_dir / "background.png"
    if bg_path.exists():
        background = imgio.load_image(bg_path)
    else:
        raise InputError(f"background.png missing in {fit_dir}")
    camera = default_camera(background.shape[1], background.shape[0])
    return mesh, motion, exposure, n_frames, camera, background


def cmd_render(args: argparse.Namespace) -> int:
    fit_dir = Path(args.fit)
    out = Path(args.out)
    mesh, motion, exposure, n_frames, camera, background = _load_fit_dir(fit_dir)
    write_manifest(out, "render", {}, {"fit": str(fit_dir)}, ["frames/"], None)
    with torch.no_grad():
        frames, _ = render_window(
            mesh, motion, exposure.epsilon, n_frames, camera, background,
            subframes=args.subframes or 8,
        )
    imgio.save_frames(out / "frames", frames)
    log.info("%d re-rendered frames written to %s", n_frames, out / "frames")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    fit_dir = Path(args.fit)
    gt_dir = Path(args.gt)
    out_file = Path(args.out)
    if not gt_dir.is_dir():
        raise InputError(f"ground-truth directory not found: {gt_dir}")
    gt_doc_path = gt_dir / "gt.json"
    if not gt_doc_path.exists():
        raise InputError(f"gt.json missing in {gt_dir}")
    gt_doc = json.loads(gt_doc_path.read_text())
    gt_mesh = import_obj(gt_dir / "gt" / "mesh.obj")
    gt_motion, gt_exposure, n_frames = motion_mod.load_motion(
        gt_dir / "gt" / "motion.json"
    )
    background = imgio.load_image(gt_dir / "gt" / "background.png")
    camera = _load_camera(gt_doc.get("camera"), background.shape[1],
                          background.shape[0])
    track = load_mask_track(gt_dir / "masks")
    scene = SyntheticScene(
        mesh=gt_mesh,
        motion=gt_motion,
        exposure=gt_exposure,
        camera=camera,
        background=background,
        frames=imgio.load_frames(gt_dir / "frames"),
        mask_track=MaskTrack(track.masks, "synthetic-ground-truth"),
        highspeed=(
            imgio.load_frames(gt_dir / "highspeed")
            if (gt_dir / "highspeed").is_dir()
            else torch.zeros(0, background.shape[0], background.shape[1], 3)
        ),
        seed=gt_doc.get("seed", 0),
        rotation_cap=gt_doc.get("rotation_cap", 0.0),
        prototype=Prototype(gt_doc["prototype"]),
        size=gt_doc["object_size"],
        bounce=gt_doc.get("bounce", False),
        knot_time=gt_doc.get("knot_time", 0.5),
    )
    mesh, motion, exposure, _, _, _ = _load_fit_dir(fit_dir)

    tsr_frames = None
    if scene.highspeed.shape[0] > 0:
        with torch.no_grad():
            tsr_frames = render_tsr(
                mesh, motion, exposure.epsilon,
                scene.highspeed.shape[0] // n_frames, n_frames, camera,
                background,
            )
    else:
        log.warning("no high-speed ground truth; emitting 3D metrics only")

    metrics = eval_mod.evaluate_against_scene(
        scene, mesh, motion, exposure, tsr_frames=tsr_frames
    )
    rows = []
    if tsr_frames is not None:
        s = scene.mask_track.subframes
        for i, (p, ss) in enumerate(zip(metrics["tsr_psnr"], metrics["tsr_ssim"])):
            rows.append((i // s + 1, i % s + 1, p, ss))
    out_file.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_file.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("frame,subframe,psnr,ssim\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r}\n")
    summary = {
        k: v for k, v in metrics.items() if not isinstance(v, list)
    }
    if tsr_frames is not None:
        summary["tsr_psnr_median"] = float(np.median(metrics["tsr_psnr"]))
        summary["tsr_ssim_median"] = float(np.median(metrics["tsr_ssim"]))
    out_file.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("evaluation written to %s (+ %s)", out_file, csv_path)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blurfit",
        description="3D shape, motion, and exposure-gap recovery from "
                    "motion-blurred video",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a video")
    p_fit.add_argument("--frames", required=True)
    p_fit.add_argument("--masks")
    p_fit.add_argument("--config")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--window", type=int)
    p_fit.add_argument("--subframes", type=int)
    p_fit.add_argument("--prototype",
                       help="comma-separated prototype names to consider")
    p_fit.add_argument("--jobs", type=int, default=os.cpu_count())

    p_synth = sub.add_parser("synth", help="generate a synthetic scene")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--rotation-cap", type=float, default=30.0)
    p_synth.add_argument("--frames", type=int, default=3)
    p_synth.add_argument("--width", type=int, default=128)
    p_synth.add_argument("--subframes", type=int)
    p_synth.add_argument("--bounce", action="store_true")
    p_synth.add_argument("--out", required=True)

    p_tsr = sub.add_parser("tsr", help="temporal super-resolution from a fit")
    p_tsr.add_argument("--fit", required=True)
    p_tsr.add_argument("--factor", type=int, default=8)
    p_tsr.add_argument("--out", required=True)

    p_render = sub.add_parser("render", help="re-render input frames from a fit")
    p_render.add_argument("--fit", required=True)
    p_render.add_argument("--subframes", type=int)
    p_render.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a fit against ground truth")
    p_eval.add_argument("--fit", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = make_parser()
    args = parser.parse_args(argv)
    handler = {
        "fit": cmd_fit,
        "synth": cmd_synth,
        "tsr": cmd_tsr,
        "render": cmd_render,
        "eval": cmd_eval,
    }[args.command]
    try:
        return handler(args)
    except (InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (FitDivergenceError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
