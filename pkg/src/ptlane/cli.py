"""``ptlane`` command line: geometry inspection, warping, data, training, evaluation.

Exit status is 0 on success, 1 on a runtime failure and 2 on a configuration
error; the message on stderr names the failing key or path.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig, default_config, load_config
from .errors import ConfigError, PtlaneError, ShapeMismatch
from .geometry import format_matrix, identity_chain
from .warp import warp_forward

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

PALETTE = np.array([[0, 0, 0], [255, 255, 255], [255, 60, 60], [60, 160, 255]], dtype=np.uint8)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not key=value", item)
        cfg.set(key.strip(), value)
    return cfg


def _run_dir(cfg: RunConfig, args, kind: str) -> Path:
    if getattr(args, "run_dir", None):
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = cfg.resolve(cfg.run.output_dir) / f"{kind}-{cfg.digest()}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.ini").write_text(cfg.to_ini())
    return path


# ------------------------------------------------------------------ commands


def cmd_config(cfg, args):
    text = cfg.to_ini()
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="")


def cmd_decompose(cfg, args):
    chain = cfg.build_chain(args.steps)
    for i, view in enumerate(chain.views):
        print(f"view {i}: {view.width} x {view.height}")
        print("K =\n" + format_matrix(view.intrinsics.matrix))
        if i < chain.n_steps:
            step = chain.steps[i]
            print(f"R_{i + 1} =\n" + format_matrix(step.rotation))
            print(f"H_{i + 1} =\n" + format_matrix(step.homography))
    print("integral =\n" + format_matrix(chain.integral))
    print(f"residual = {chain.composition_residual():.3e}")


def cmd_warp(cfg, args):
    from .scenedata import load_image, save_png

    image = load_image(args.input)
    tmpl = cfg.scene_template()
    if image.shape[1:] != tmpl.view.shape:
        raise ShapeMismatch(f"{args.input}: image is {image.shape[2]} x {image.shape[1]}, "
                            f"camera is {tmpl.width} x {tmpl.height}")
    chain = identity_chain(tmpl.view, args.steps or 1) if args.identity else \
        cfg.build_chain(args.steps)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / "view_0.png", image)
    h = None
    for i, step in enumerate(chain.steps, start=1):
        h = step.homography if h is None else h.then(step.homography)
        if args.all_steps or i == chain.n_steps:
            save_png(out / f"view_{i}.png", np.clip(warp_forward(image, h), 0.0, 1.0))
            print(f"view_{i}.png {h.target.width} x {h.target.height}")


def cmd_synth(cfg, args):
    from .scenedata import generate_dataset

    count = cfg.data.count if args.count is None else args.count
    root = Path(args.output) if args.output else cfg.resolve(cfg.data.root)
    start = time.perf_counter()
    generate_dataset(cfg.scene_template(), count, cfg.data.seed, root)
    print(f"wrote {count} scenes to {root} in {time.perf_counter() - start:.1f} s")


def _dataset(cfg, args):
    from .scenedata import load_dataset

    root = Path(args.data) if getattr(args, "data", None) else cfg.resolve(cfg.data.root)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root}: no dataset manifest (run 'ptlane synth' first)")
    return load_dataset(root)


def cmd_train(cfg, args):
    from .training import save_model, split, train, write_loss_log

    if args.no_ptl:
        cfg.train.ptl = False
    if args.steps is not None:
        cfg.train.steps = args.steps
    train_items, _ = split(_dataset(cfg, args), cfg)
    if not train_items:
        raise ConfigError("data.train_count leaves no training images", "data.train_count")
    run = _run_dir(cfg, args, "train")

    def progress(step, value):
        if args.verbose:
            print(f"step {step} loss {value:.6f}", flush=True)

    res = train(cfg, train_items, overfit_one=args.overfit, progress=progress)
    write_loss_log(run / "loss.csv", res.losses)
    save_model(run / "model.ckpt", res, cfg, cfg.train.ptl)
    first = res.losses[0] if res.losses else float("nan")
    last = res.losses[-1] if res.losses else float("nan")
    print(f"run_dir = {run}")
    print(f"loss {first:.6f} -> {last:.6f} in {len(res.losses)} steps ({res.seconds:.1f} s)")
    print(f"warp_ops = {res.model.warp_count}")


def _emit_eval(run, report, curves, unit):
    from .training import write_report

    write_report(run / "report.txt", report)
    for key, curve in curves.items():
        if key.endswith("_" + unit):
            curve.to_csv(run / f"bins_{key}.csv")
    for k, v in report.items():
        print(f"{k} = {v}")
    print(f"run_dir = {run}")


def cmd_eval(cfg, args):
    from .scenedata import read_tusimple
    from .training import evaluate_items, load_model, split

    under = args.under_horizon or cfg.eval.under_horizon
    if args.predictions:
        if not args.labels:
            raise ConfigError("--predictions needs --labels", "--labels")
        preds, gts = read_tusimple(args.predictions), read_tusimple(args.labels)
        if under:
            row = cfg.scene_template().horizon_row
            gts = ev.under_horizon_filter(gts, row)
        acc, counts = ev.tusimple_accuracy(preds, gts, cfg.eval.threshold)
        fp, fn = ev.tusimple_fp_fn(preds, gts, cfg.eval.threshold, cfg.eval.lane_match_ratio)
        geometry = ev.CameraGeometry(cfg.camera.f, cfg.scene_template().principal_point[1],
                                     cfg.camera.camera_height, cfg.camera.pitch)
        edges = (cfg.eval.bins_px if args.bins == "px" else cfg.eval.bins_m) or \
            ev.default_edges(args.bins, cfg.camera.height)
        curve = ev.distance_binned_accuracy(counts, edges, args.bins, cfg.camera.height,
                                            geometry)
        report = {"images": len(counts.images), "accuracy": acc, "fp": fp, "fn": fn,
                  "points": sum(c.total for c in counts.images), "under_horizon": bool(under),
                  "bins": args.bins}
        _emit_eval(_run_dir(cfg, args, "eval"), report, {f"accuracy_{args.bins}": curve},
                   args.bins)
        return
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --predictions", "--checkpoint")
    model, _ = load_model(args.checkpoint, cfg)
    _, held_out = split(_dataset(cfg, args), cfg)
    if not held_out:
        raise ConfigError("data.train_count leaves no held-out images", "data.train_count")
    scored = evaluate_items(model, held_out, cfg, under, args.bins)
    _emit_eval(_run_dir(cfg, args, "eval"), scored["report"], scored["curves"], args.bins)


def cmd_viz(cfg, args):
    from .ptseg import predict
    from .scenedata import load_image, save_png
    from .training import load_model

    model, _ = load_model(args.checkpoint, cfg)
    image = load_image(args.input)
    pred = predict(model, image)
    if args.features:
        from .ptseg import feature_panel, forward

        fdir = Path(args.features)
        fdir.mkdir(parents=True, exist_ok=True)
        for k, (name, fmap) in enumerate(forward(model, image, keep_features=True)["features"]):
            save_png(fdir / f"{k:02d}_{name}.png", feature_panel(fmap)[None].repeat(3, 0))
    rgb = (image.transpose(1, 2, 0) * 255).round().astype(np.uint8)
    overlay = rgb.copy()
    sem = pred["semantic"]
    overlay[sem > 0] = PALETTE[sem[sem > 0] % len(PALETTE)]
    if pred["instance"] is not None:
        rng = np.random.default_rng(7)
        colours = rng.integers(64, 256, size=(int(pred["instance"].max()) + 1, 3))
        lane = pred["instance"] > 0
        overlay[lane] = colours[pred["instance"][lane]]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(out, np.concatenate([rgb, overlay], axis=1).transpose(2, 0, 1) / 255.0)
    print(f"wrote {out}")


def cmd_experiment(cfg, args):
    from .training import run_experiment

    run = _run_dir(cfg, args, "experiment")
    root = Path(args.data) if args.data else cfg.resolve(cfg.data.root)
    if not (root / "manifest.txt").exists():
        from .scenedata import generate_dataset

        generate_dataset(cfg.scene_template(), cfg.data.count, cfg.data.seed, root)

    def progress(name, step, value):
        if args.verbose and step % 50 == 0:
            print(f"{name} step {step} loss {value:.6f}", flush=True)

    out = run_experiment(cfg, root, run, progress)
    for k, v in out["summary"].items():
        print(f"{k} = {v}")
    print(f"run_dir = {run}")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="INI config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; flags win over the file)")
    common.add_argument("--run-dir", help="write artifacts here instead of a fresh run directory")

    p = argparse.ArgumentParser(prog="ptlane", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("config", parents=[common], help="print the effective config")
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("decompose", parents=[common], help="print the PTL chain")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("warp", parents=[common], help="warp an image through the chain")
    s.add_argument("--input", "-i", required=True)
    s.add_argument("--output", "-o", required=True, help="output directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--all-steps", action="store_true", help="write every intermediate view")
    s.add_argument("--identity", action="store_true", help="use an identity chain")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train the segmentation network")
    s.add_argument("--data")
    s.add_argument("--steps", type=int)
    s.add_argument("--no-ptl", action="store_true", help="baseline without warps")
    s.add_argument("--overfit", action="store_true", help="train on the first image only")
    s.add_argument("--verbose", "-v", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or prediction file")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--predictions", help="TuSimple JSON-lines predictions")
    s.add_argument("--labels", help="TuSimple JSON-lines ground truth")
    s.add_argument("--bins", choices=("px", "m"), default="px")
    s.add_argument("--under-horizon", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", parents=[common], help="render a prediction overlay")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", "-i", required=True)
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--features", help="also write per-stage feature panels to this directory")
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("experiment", parents=[common], help="PTL vs baseline on synthetic data")
    s.add_argument("--data")
    s.add_argument("--verbose", "-v", action="store_true")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PtlaneError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
