"""Command-line entry point: synth, align, train, infer, eval, gradcheck.

Every run writes a ``run_manifest.json`` capturing the command, the resolved
configuration, the seed, and all input/output paths, so a rerun of the same
manifest reproduces its outputs bit-exactly. Config precedence is
flags > --config JSON file > defaults. ``DARKFORGE_THREADS`` bounds BLAS
parallelism and must be honored before numpy loads, hence the top of this
module.
"""

from __future__ import annotations

import os

_threads = os.environ.get("DARKFORGE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import glob as globlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .align import RansacConfig, align_bracket
from .errors import DatasetError
from .metrics import checkerboard_score, psnr, ssim
from .models import (
    ModelConfig,
    PRESETS,
    load_model,
    pipeline_forward,
)
from .raw import MONO_PHASE, RawMeta, load_bayer, load_mono, read_raw_file, write_raw_file
from .synth import (
    DEFAULT_EXPOSURES,
    DEFAULT_GT_EXPOSURE,
    NoiseModel,
    SceneSpec,
    generate_dataset,
    load_mcr,
    make_scene,
)
from .train import TrainConfig, gradcheck_suite, sample_from_frames, train

GRADCHECK_TOLERANCE = 1e-4


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started_at": _write_manifest.started_at,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


_write_manifest.started_at = None


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"error: cannot read config file {path}: {exc}")


def _resolve(flag, file_cfg: dict, key: str, default):
    """flags > config file > defaults."""
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _model_config(args, file_cfg: dict) -> ModelConfig:
    base = PRESETS[_resolve(args.preset, file_cfg, "preset", "baseline")]
    fields = asdict(base)
    for key in fields:
        fields[key] = _resolve(getattr(args, key, None), file_cfg, key, fields[key])
    return ModelConfig(**fields)


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    width = _resolve(args.width, file_cfg, "width", 1280)
    height = _resolve(args.height, file_cfg, "height", 1024)
    n_scenes = _resolve(args.scenes, file_cfg, "scenes", 1)
    exposures = tuple(
        float(e) for e in _resolve(args.exposures, file_cfg, "exposures", "").split(",")
    ) if _resolve(args.exposures, file_cfg, "exposures", "") else DEFAULT_EXPOSURES
    gt_exposure = _resolve(args.gt_exposure, file_cfg, "gt_exposure", DEFAULT_GT_EXPOSURE)
    noise = NoiseModel(
        shot_gain=_resolve(args.shot_gain, file_cfg, "shot_gain", 4000.0),
        read_sigma=_resolve(args.read_sigma, file_cfg, "read_sigma", 0.003),
        seed=seed,
    )
    scenes = [
        SceneSpec(
            rgb=make_scene(seed + i, height, width, white_background=args.white_background),
            gt_exposure=gt_exposure,
            input_exposures=exposures,
            cfa_phase=args.cfa_phase,
            scene_id=f"scene{i:03d}",
        )
        for i in range(n_scenes)
    ]
    out = Path(args.out)
    manifest = generate_dataset(scenes, noise, out, bit_depth=args.bit_depth)
    _write_manifest(
        out,
        "synth",
        {
            "scenes": n_scenes,
            "width": width,
            "height": height,
            "bit_depth": args.bit_depth,
            "exposures": list(exposures),
            "gt_exposure": gt_exposure,
            "shot_gain": noise.shot_gain,
            "read_sigma": noise.read_sigma,
            "cfa_phase": args.cfa_phase,
            "white_background": args.white_background,
        },
        seed,
        [],
        [manifest],
    )
    print(f"wrote {len(scenes)} scene(s) x {len(exposures)} exposures to {out}")
    return 0


def _load_frame_any(path: Path):
    """Returns (plane, phase-or-None, meta) for .raw or grayscale image files."""
    if path.suffix == ".raw":
        samples, meta = read_raw_file(path)
        black, white = meta.resolved_levels()
        plane = np.clip((samples.astype(np.float64) - black) / (white - black), 0.0, 1.0)
        phase = None if meta.cfa_phase == MONO_PHASE else meta.cfa_phase
        return plane, phase, meta
    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return img, None, None


def cmd_align(args) -> int:
    ref_src, _, _ = _load_frame_any(Path(args.ref_src))
    ref_dst, _, _ = _load_frame_any(Path(args.ref_dst))
    paths = sorted(globlib.glob(args.bracket))
    if not paths:
        raise SystemExit(f"error: no files match {args.bracket}")
    frames, phases, metas = [], [], []
    for p in paths:
        plane, phase, meta = _load_frame_any(Path(p))
        frames.append(plane)
        phases.append(phase)
        metas.append(meta)
    ransac = RansacConfig(iters=args.ransac_iters, inlier_px=args.inlier_px, seed=args.seed)
    aligned, report = align_bracket(ref_src, ref_dst, frames, ransac, phases)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path, frame, meta in zip(paths, aligned, metas):
        name = Path(path).stem + "_aligned"
        if meta is not None:
            white = 2**meta.bit_depth - 1
            dest = out / (name + ".raw")
            write_raw_file(dest, np.rint(frame * white).astype(
                np.uint8 if meta.bit_depth == 8 else np.uint16), meta)
        else:
            dest = out / (name + ".png")
            Image.fromarray(np.rint(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(dest)
        outputs.append(dest)
    report_path = out / "align_report.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_matches", "n_inliers", "inlier_ratio", "mean_reproj_px"])
        writer.writerow(
            [report.n_matches, report.n_inliers, f"{report.inlier_ratio:.4f}", f"{report.mean_reproj_px:.4f}"]
        )
    _write_manifest(
        out,
        "align",
        {"ransac_iters": ransac.iters, "inlier_px": ransac.inlier_px},
        args.seed,
        [args.ref_src, args.ref_dst] + paths,
        outputs + [report_path],
    )
    print(
        f"aligned {len(aligned)} frame(s): {report.n_inliers}/{report.n_matches} inliers, "
        f"mean error {report.mean_reproj_px:.3f}px"
    )
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    model_config = _model_config(args, file_cfg)
    train_config = TrainConfig(
        steps=_resolve(args.steps, file_cfg, "steps", 500),
        lr_initial=_resolve(args.lr, file_cfg, "lr_initial", 1e-4),
        lr_after_converge=_resolve(args.lr_after, file_cfg, "lr_after_converge", 1e-5),
        lr_switch_step=_resolve(args.lr_switch_step, file_cfg, "lr_switch_step", None),
        crop=_resolve(args.crop, file_cfg, "crop", 512),
        batch=_resolve(args.batch, file_cfg, "batch", 1),
        seed=_resolve(args.seed, file_cfg, "seed", 0),
    )
    dataset = load_mcr(args.data)
    samples = [
        sample_from_frames(item.bayer, item.mono, item.rgb, item.ratio)
        for item in (dataset[i] for i in range(len(dataset)))
    ]
    out = Path(args.out)
    result = train(samples, model_config, train_config, out_dir=out, log_every=args.log_every)
    _write_manifest(
        out,
        "train",
        {"model": asdict(model_config), "train": asdict(train_config)},
        train_config.seed,
        [args.data],
        [result.checkpoint_path, out / "loss_curve.csv"],
    )
    final = result.curve[-1]
    print(f"trained {train_config.steps} steps; final loss {final[4]:.5f} -> {result.checkpoint_path}")
    return 0


def cmd_infer(args) -> int:
    config, params = load_model(args.checkpoint)
    paths = sorted(globlib.glob(args.input))
    if not paths:
        raise SystemExit(f"error: no inputs match {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for p in paths:
        bayer = load_bayer(p)
        ratio = args.ratio
        if ratio is None:
            if args.gt_exposure is None:
                raise SystemExit("error: give --ratio or --gt-exposure")
            from .raw import compute_ratio

            ratio = compute_ratio(bayer.exposure_time, args.gt_exposure)
        mono, rgb = pipeline_forward(bayer, ratio, params, config)
        stem = Path(p).stem
        mono_path = out / f"{stem}_mono.png"
        rgb_path = out / f"{stem}_rgb.png"
        Image.fromarray(np.rint(mono * 255).astype(np.uint8)).save(mono_path)
        Image.fromarray(np.rint(rgb * 255).astype(np.uint8)).save(rgb_path)
        outputs += [mono_path, rgb_path]
        print(f"{p}: ratio {ratio:g} -> {mono_path.name}, {rgb_path.name}")
    _write_manifest(
        out, "infer", {"checkpoint": str(args.checkpoint), "ratio": args.ratio},
        None, paths, outputs,
    )
    return 0


def cmd_eval(args) -> int:
    out_paths = sorted(Path(args.outputs).glob("*.png"))
    if not out_paths:
        raise SystemExit(f"error: no .png outputs under {args.outputs}")
    rows = []
    for out_path in out_paths:
        ref_path = Path(args.reference) / out_path.name
        if not ref_path.exists():
            raise SystemExit(f"error: no reference for {out_path.name} under {args.reference}")
        img_a = np.asarray(Image.open(out_path), dtype=np.float64) / 255.0
        img_b = np.asarray(Image.open(ref_path), dtype=np.float64) / 255.0
        if args.eight_bit:
            img_a = np.rint(img_a * 255.0) / 255.0
            img_b = np.rint(img_b * 255.0) / 255.0
        rows.append(
            (out_path.name, psnr(img_a, img_b), ssim(img_a, img_b), checkerboard_score(img_a))
        )
    csv_path = Path(args.out)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "psnr_db", "ssim", "checkerboard"])
        for name, p_db, s_val, c_val in rows:
            writer.writerow([name, f"{p_db:.4f}", f"{s_val:.6f}", f"{c_val:.6f}"])
        writer.writerow(
            [
                "aggregate_mean",
                f"{np.mean([r[1] for r in rows]):.4f}",
                f"{np.mean([r[2] for r in rows]):.6f}",
                f"{np.mean([r[3] for r in rows]):.6f}",
            ]
        )
    _write_manifest(
        csv_path.parent, "eval", {"eight_bit": args.eight_bit}, None,
        [args.outputs, args.reference], [csv_path],
    )
    print(f"evaluated {len(rows)} image(s) -> {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(seed=args.seed)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:32s} {err:.3e}  {status}")
        worst = max(worst, err)
    print(f"worst relative error: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if worst < GRADCHECK_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="darkforge",
        description="Low-light raw enhancement pipeline: dataset synthesis, "
        "alignment, training, inference, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--bit-depth", type=int, default=8, choices=(8, 16))
    p.add_argument("--exposures", help="comma-separated seconds")
    p.add_argument("--gt-exposure", type=float, dest="gt_exposure")
    p.add_argument("--shot-gain", type=float, dest="shot_gain")
    p.add_argument("--read-sigma", type=float, dest="read_sigma")
    p.add_argument("--cfa-phase", default="RGGB", choices=("RGGB", "GRBG", "GBRG", "BGGR"))
    p.add_argument("--white-background", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("align", help="align an exposure bracket to a reference pair")
    p.add_argument("--ref-src", required=True)
    p.add_argument("--ref-dst", required=True)
    p.add_argument("--bracket", required=True, help="glob of frames from the source camera")
    p.add_argument("--out", required=True)
    p.add_argument("--ransac-iters", type=int, default=2000)
    p.add_argument("--inlier-px", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("train", help="train the joint pipeline on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--steps", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-after", type=float, dest="lr_after")
    p.add_argument("--lr-switch-step", type=int, dest="lr_switch_step")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--depth", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run the pipeline on raw frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="path or glob of .raw inputs")
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float)
    p.add_argument("--gt-exposure", type=float, dest="gt_exposure")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM/checkerboard over output vs reference dirs")
    p.add_argument("--outputs", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="CSV destination")
    p.add_argument("--eight-bit", action="store_true", help="quantize both sides to 8 bits first")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _write_manifest.started_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
