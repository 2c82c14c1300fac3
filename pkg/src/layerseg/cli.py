"""Command-line front end: dataset generation, training, inference,
evaluation and layer-activation visualization."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, report, sceneio
from .metrics import evaluate_dataset
from .model import NetworkConfig, forward, load_checkpoint
from .postprocess import PostprocessParams, segment
from .synth import SceneSpec
from .train import TrainConfig, train


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _write_manifest(run_dir, payload):
    payload = dict(payload, tool_version=__version__)
    with open(Path(run_dir) / "manifest.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen_data(args):
    fields = _load_json(args.spec)
    fields.pop("seed", None)
    for key in ("object_count_range", "axis_range"):
        if key in fields:
            fields[key] = tuple(fields[key])
    spec = SceneSpec(seed=args.seed, **fields)
    sceneio.generate_dataset(args.out, spec, args.count, args.seed)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _limit_threads(n):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("warning: threadpoolctl unavailable, --threads ignored", file=sys.stderr)
        return None
    return threadpool_limits(limits=n)


def cmd_train(args):
    cfg_fields = _load_json(args.config) if args.config else {}
    net_fields = cfg_fields.pop("network", {})
    net_config = NetworkConfig(**net_fields)
    cfg_fields["seed"] = args.seed
    config = TrainConfig(**cfg_fields)
    scenes = [scene for _, scene in sceneio.load_dataset(args.data)]
    limiter = _limit_threads(args.threads)
    try:
        checkpoints = train(scenes, net_config, config, args.out)
    finally:
        if limiter is not None:
            limiter.unregister()
    run_dir = Path(args.out)
    curves = report.plot_training_curves(run_dir / "train_log.jsonl",
                                         run_dir / "training_curves.png")
    _write_manifest(run_dir, {
        "command": "train",
        "dataset": str(args.data),
        "seed": args.seed,
        "network": dataclasses.asdict(net_config),
        "train_config": dataclasses.asdict(config),
        "checkpoints": {str(k): str(v) for k, v in checkpoints.items()},
        "log": str(run_dir / "train_log.jsonl"),
        "figures": [str(curves)],
    })
    print(f"training complete; checkpoints in {run_dir}")
    return 0


def _load_input_image(path):
    path = Path(path)
    if path.is_dir():
        return sceneio.load_scene(path).image
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def cmd_infer(args):
    net_config, params = load_checkpoint(args.ckpt)
    image = _load_input_image(args.input)
    div = 2 ** net_config.depth
    h, w = image.shape
    if h % div or w % div:
        print(f"error: input {h}x{w} not divisible by {div}; pad to "
              f"{-(-h // div) * div}x{-(-w // div) * div}", file=sys.stderr)
        return 1
    prediction = forward(image, params, net_config)
    pp = PostprocessParams(threshold=args.tau, min_size=args.smin,
                           overlap_mode=args.overlap_mode)
    result = segment(prediction, pp)
    sceneio.save_result(args.out, result)
    print(f"{result.num_instances} instances written to {args.out}")
    return 0


def cmd_eval(args):
    gt_names = sceneio.scene_names(args.gt)
    pred_dir = Path(args.pred)
    pred_names = sorted(p.name for p in pred_dir.iterdir()
                        if p.is_dir() and (p / "result.json").exists())
    if set(pred_names) != set(gt_names):
        missing = sorted(set(gt_names) - set(pred_names))
        extra = sorted(set(pred_names) - set(gt_names))
        print(f"error: scene sets differ; missing predictions: {missing}; "
              f"unexpected predictions: {extra}", file=sys.stderr)
        return 1
    preds, gts = [], []
    for name in gt_names:
        preds.append(sceneio.load_result_masks(pred_dir / name))
        gts.append(sceneio.load_scene(Path(args.gt) / name).instances)
    rep = evaluate_dataset(preds, gts).to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(rep, f, indent=2, sort_keys=True)
        f.write("\n")
    report.write_report_csv(rep, out.with_suffix(".csv"))
    report.plot_ap_report(rep, out.with_suffix(".png"))
    print(f"mean AP {rep['mean_AP']:.4f}  AJI {rep['AJI']:.4f} -> {out}")
    return 0


def cmd_viz(args):
    net_config, params = load_checkpoint(args.ckpt)
    scene = sceneio.load_scene(args.scene)
    prediction = forward(scene.image, params, net_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def to_png(field, path):
        # round-half-up, matches the dataset writer
        arr = np.floor(field * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)

    for k in range(net_config.num_layers):
        to_png(prediction.layering[:, :, k], out / f"layer_{k + 1}.png")
    to_png(prediction.foreground, out / "foreground.png")
    print(f"wrote {net_config.num_layers + 1} activation maps to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="layerseg",
        description="Instance segmentation via object layering")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--count", required=True, type=int, help="number of scenes")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", required=True, type=int, help="base RNG seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-phase training on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="train config JSON file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", required=True, type=int, help="training seed")
    p.add_argument("--threads", type=int, help="cap worker threads")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment an image or scene directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="image file or scene directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tau", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--smin", type=int, default=30, help="minimal object size")
    p.add_argument("--no-overlap-mode", dest="overlap_mode", action="store_false",
                   help="disable the multi-hot over-threshold rule")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of per-scene predictions")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--out", required=True, help="output report JSON file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write per-layer activation maps")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
