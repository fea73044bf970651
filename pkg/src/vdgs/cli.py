"""Command-line interface: ``vdgs {train,render,eval,ablate,gradcheck}``.

Exit codes: 0 on success, 1 on runtime failure (with a diagnostic on
stderr), 2 on invalid usage. ``VDGS_THREADS`` bounds rasterizer workers.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as _gradcheck
from . import io as vio
from ._validation import ValidationError
from .metrics import psnr, ssim
from .mlp import ALL_VARIANTS, ModulationVariant
from .rasterizer import render
from .trainer import TrainConfig, TrainingError, format_record, init_state, train

CHECKPOINT_NAME = "checkpoint.vdgs"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.txt"

log = logging.getLogger("vdgs")


class CommandError(RuntimeError):
    """Runtime failure reported with exit code 1."""


# ---------------------------------------------------------------- helpers


def _build_config(args) -> TrainConfig:
    base = vio.parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = {
        "variant": getattr(args, "variant", None),
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "iterations", None),
    }
    if getattr(args, "deterministic", False):
        overrides["deterministic"] = True
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


def _read_log_prefix(path: Path, upto: int) -> list:
    """Metrics lines with iteration <= ``upto`` (used when resuming)."""
    import json

    if not path.exists():
        return []
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["iteration"] <= upto:
            keep.append(line)
    return keep


def run_training(config: TrainConfig, dataset, out_dir: Path, resume: Path | None = None,
                 checkpoint_interval: int = 0, stop_at: int | None = None):
    """Train into ``out_dir`` (checkpoint, metrics log, config), resuming if asked."""
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    log_path = out_dir / METRICS_NAME
    state = None
    prefix = []
    if resume is not None:
        ck = vio.load_checkpoint(resume)
        if ck.config.to_dict() != config.to_dict():
            diff = sorted(k for k, v in config.to_dict().items() if ck.config.to_dict().get(k) != v)
            log.warning("resuming with a config that differs from the checkpoint in: %s", ", ".join(diff))
        state = ck.state
        prefix = _read_log_prefix(log_path, state.iteration)
    else:
        state = init_state(config, dataset)
    vio.save_config(config, out_dir / CONFIG_NAME)

    def on_iteration(st, record):
        if checkpoint_interval and st.iteration % checkpoint_interval == 0:
            vio.save_checkpoint(ckpt_path, st, config, dataset)

    with open(log_path, "w") as fh:
        for line in prefix:
            fh.write(line + "\n")
        state, records = train(config, dataset, state, log_file=fh, stop_at=stop_at, on_iteration=on_iteration)
    vio.save_checkpoint(ckpt_path, state, config, dataset)
    return state, records


def _evaluate_rows(state, dataset, split: str, background, quantize: bool = True):
    cams = dataset.cameras(split)
    if not cams:
        raise CommandError(f"dataset has no {split!r} views")
    rows = []
    for i, (cam, target) in enumerate(zip(cams, dataset.images(split))):
        pred = np.clip(render(state.cloud, cam, state.grid, state.mlp, state.variant, background=background).image, 0, 1)
        if quantize:
            pred = vio.to_uint8(pred) / 255.0
        if pred.shape != target.shape:
            raise CommandError(f"view {i}: rendered {pred.shape} but the image is {target.shape}")
        rows.append((i, psnr(pred, target), ssim(pred, target)))
    return rows


def _format_rows(rows, fmt: str, stream):
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    if fmt == "csv":
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["view", "psnr", "ssim"])
        for i, p, s in rows:
            w.writerow([i, f"{p:.6f}", f"{s:.6f}"])
        w.writerow(["mean", f"{mean_p:.6f}", f"{mean_s:.6f}"])
    else:
        stream.write(f"{'view':>6} {'PSNR':>10} {'SSIM':>8}\n")
        for i, p, s in rows:
            stream.write(f"{i:>6} {p:>10.4f} {s:>8.5f}\n")
        stream.write(f"{'mean':>6} {mean_p:>10.4f} {mean_s:>8.5f}\n")
    return mean_p, mean_s


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = _build_config(args)
    dataset = vio.load_transforms(args.data)
    state, records = run_training(config, dataset, Path(args.out), Path(args.resume) if args.resume else None,
                                  args.checkpoint_interval, args.stop_at)
    last = next((r for r in reversed(records) if r["psnr"] is not None), None)
    msg = f"trained {state.iteration} iterations, {len(state.cloud)} Gaussians"
    if last is not None:
        msg += f", test PSNR {last['psnr']:.3f} dB"
    print(msg)
    return 0


def _render_cameras(args, ck):
    if args.poses_file:
        return vio.load_poses(args.poses_file)
    cams = ck.split_cameras(args.split)
    if args.camera_index is None:
        return cams
    for i in args.camera_index:
        if not 0 <= i < len(cams):
            raise CommandError(f"camera index {i} out of range: split {args.split!r} has {len(cams)} cameras")
    return [cams[i] for i in args.camera_index]


def cmd_render(args) -> int:
    ck = vio.load_checkpoint(args.checkpoint)
    cams = _render_cameras(args, ck)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = ck.state
    for i, cam in enumerate(cams):
        img = render(st.cloud, cam, st.grid, st.mlp, st.variant, background=ck.background).image
        vio.write_image(out / f"{i:04d}.{args.format}", np.clip(img, 0, 1))
    print(f"wrote {len(cams)} image(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    ck = vio.load_checkpoint(args.checkpoint)
    dataset = vio.load_transforms(args.data)
    rows = _evaluate_rows(ck.state, dataset, args.split, dataset.background, quantize=not args.no_quantize)
    _format_rows(rows, args.format, sys.stdout)
    return 0


def cmd_ablate(args) -> int:
    base = _build_config(args)
    dataset = vio.load_transforms(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = [ModulationVariant.parse(v) for v in args.variants] if args.variants else list(ALL_VARIANTS)
    table = []
    for v in variants:
        config = base.replace(variant=v.value)
        vdir = out / v.value
        ckpt = vdir / CHECKPOINT_NAME
        state = None
        if ckpt.exists():
            ck = vio.load_checkpoint(ckpt)
            if ck.config.to_dict() == config.to_dict() and ck.state.iteration >= config.iterations:
                state = ck.state
                log.info("%s: reusing finished checkpoint", v.tag)
        if state is None:
            resume = ckpt if ckpt.exists() else None
            if resume is not None:
                log.info("%s: resuming from iteration %d", v.tag, vio.load_checkpoint(ckpt).state.iteration)
            state, _ = run_training(config, dataset, vdir, resume, args.checkpoint_interval)
        rows = _evaluate_rows(state, dataset, args.split, dataset.background)
        table.append({
            "variant": v.value, "tag": v.tag,
            "psnr": float(np.mean([r[1] for r in rows])), "ssim": float(np.mean([r[2] for r in rows])),
            "num_gaussians": len(state.cloud), "iterations": state.iteration,
        })
        print(f"{v.tag:>4} {table[-1]['psnr']:.4f} dB", file=sys.stderr)
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    w.writeheader()
    for row in table:
        w.writerow({k: (f"{x:.6f}" if isinstance(x, float) else x) for k, x in row.items()})
    (out / "ablation.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(args.seed) if args.seed else _gradcheck.DEFAULT_SEEDS
    tol = _gradcheck.TOLERANCE[args.precision]
    results = _gradcheck.run_all(seeds, args.precision, args.suite)
    failed = False
    for name, res in results.items():
        ok = res.worst <= tol
        failed |= not ok
        worst_group = max(res.groups, key=res.groups.get) if res.groups else "-"
        print(f"{name:<12} worst {res.worst:.3e} ({worst_group})  {'ok' if ok else 'FAIL'}  [tol {tol:g}]")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdgs", description="View-dependent Gaussian splatting on the CPU.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def training_flags(q, data_required=True):
        q.add_argument("--data", required=data_required, help="dataset directory or transforms file")
        q.add_argument("--config", help="key = value config file")
        q.add_argument("--seed", type=int)
        q.add_argument("--iterations", type=int)
        q.add_argument("--deterministic", action="store_true", help="bit-reproducible reductions")
        q.add_argument("--checkpoint-interval", type=int, default=0, metavar="N",
                       help="also write the checkpoint every N iterations")

    t = sub.add_parser("train", help="train a model")
    training_flags(t)
    t.add_argument("--variant", type=ModulationVariant.parse, help="modulation variant (name or tag, e.g. O*)")
    t.add_argument("--mode", choices=["joint", "pre-attach", "pre_attach"])
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, metavar="N", help="stop after iteration N (resume later)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    g = r.add_mutually_exclusive_group()
    g.add_argument("--camera-index", type=int, action="append", help="index into the stored cameras (repeatable)")
    g.add_argument("--poses-file", help="transforms-style JSON with the poses to render")
    r.add_argument("--split", default="test", help="camera split used with --camera-index")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--format", choices=["png", "ppm"], default="png")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--format", choices=["table", "csv"], default="table")
    e.add_argument("--no-quantize", action="store_true", help="compare float renders instead of 8-bit ones")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare all modulation variants")
    training_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=["joint", "pre-attach", "pre_attach"])
    a.add_argument("--split", default="test")
    a.add_argument("--variants", nargs="+", help="subset of variants (default: all seven)")
    a.set_defaults(func=cmd_ablate, checkpoint_interval=500)

    c = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    c.add_argument("--seed", type=int, action="append", help="seed (repeatable; default 0-4)")
    c.add_argument("--precision", choices=["double", "single"], default="double")
    c.add_argument("--suite", action="append", choices=list(_gradcheck.SUITES))
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ValidationError, TrainingError, FloatingPointError, OSError) as exc:
        print(f"vdgs {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
