"""Command-line pipeline driver.

Subcommands cover the full workflow: synth -> preprocess -> split ->
train -> predict -> refine -> eval, plus gradcheck for the gradient
suite and ablate for the scripted sweeps. Exit codes: 0 ok, 1 contract
violation, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import harness, metrics, postprocess, segnet
from .harness import (
    AugmentSpec,
    PhantomSpec,
    RunConfig,
    build_training_arrays,
    kfold_split,
    list_dataset,
    render_overlay,
    run_config_from_json,
    run_config_to_json,
    split_items,
    synth_phantom,
    write_folds_csv,
)
from .imagecore import GrayImage, MultiChannelImage, load_image, save_image, to_mask
from .preprocess import BenGrahamConfig, ClaheConfig
from .segnet import NetworkConfig, TrainConfig


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except Exception as e:
        raise ValueError(f"bad grid spec {text!r}, want WxH") from e


def _add_enhance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clahe-grid", default="4x4", help="tile grid, WxH")
    p.add_argument("--clahe-clip", type=float, default=8.0)
    p.add_argument("--canny-low", type=float, default=30.0)
    p.add_argument("--canny-high", type=float, default=90.0)
    p.add_argument("--closing-radius", type=int, default=5)
    p.add_argument("--crop-fraction", type=float, default=0.9)
    p.add_argument("--gray-offset", type=int, default=128)


def _enhance_configs(args) -> tuple[ClaheConfig, BenGrahamConfig]:
    gw, gh = _parse_grid(args.clahe_grid)
    return (ClaheConfig(gw, gh, args.clahe_clip),
            BenGrahamConfig(args.canny_low, args.canny_high, args.closing_radius,
                            args.crop_fraction, args.gray_offset))


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    base = PhantomSpec(canvas=args.size, n_branches=args.branches,
                       width_range=(args.width_min, args.width_max),
                       stenosis_prob=args.stenosis_prob, stenosis_pinch=args.pinch,
                       noise_sigma=args.noise, vignette=args.vignette,
                       contrast=args.contrast, seed=args.seed)
    for i in range(args.count):
        spec = replace(base, seed=args.seed + i)
        img, mask = synth_phantom(spec)
        name = f"phantom_{i:04d}.png"
        save_image(img, out / "images" / name)
        save_image(mask, out / "masks" / name)
    (out / "synth_config.json").write_text(
        json.dumps({"count": args.count, **asdict(base)}, sort_keys=True, indent=2))
    print(f"wrote {args.count} phantoms under {out}")
    return 0


def cmd_preprocess(args) -> int:
    clahe_cfg, bg_cfg = _enhance_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = list_dataset(args.images)
    for item in items:
        channels = harness.enhanced_channels(load_image(item.image_path), clahe_cfg, bg_cfg)
        for name, img in channels.items():
            save_image(img, out / f"{item.id}_{name}.png")
    print(f"enhanced {len(items)} images into {out}")
    return 0


def cmd_split(args) -> int:
    items = list_dataset(args.images)
    split = kfold_split(len(items), args.k, args.seed)
    write_folds_csv([i.id for i in items], split, args.out)
    print(f"assigned {len(items)} items to {args.k} folds -> {args.out}")
    return 0


def run_training(cfg: RunConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(run_config_to_json(cfg))
    items = list_dataset(cfg.images_dir, cfg.masks_dir)
    train_items, val_items, test_items = split_items(items, cfg)
    train_set, val_set = build_training_arrays(train_items, val_items, cfg)
    net_cfg = replace(cfg.network, in_channels=cfg.in_channels())
    params = segnet.build_network(net_cfg, cfg.seed)
    best, history = segnet.train(params, train_set, val_set, cfg.train)
    segnet.write_history_csv(history, out / "history.csv")
    extra = {"channels": cfg.channels, "clahe": asdict(cfg.clahe),
             "ben_graham": asdict(cfg.ben_graham),
             "test_items": [i.id for i in test_items]}
    segnet.save_checkpoint(best, out / "checkpoint.json", extra)
    return {"out": out, "history": history, "params": best,
            "test_items": test_items, "config": cfg}


def cmd_train(args) -> int:
    cfg = run_config_from_json(Path(args.config).read_text())
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    result = run_training(cfg)
    last = result["history"][-1]
    print(f"trained {len(result['history'])} epochs, "
          f"final val loss {last['val_loss']:.4f} -> {result['out']}")
    return 0


def _predict_inputs(checkpoint_extra: dict, images_dir, preprocessed_dir):
    cfg = RunConfig(images_dir=str(images_dir), masks_dir=str(images_dir),
                    out_dir=".", preprocessed_dir=preprocessed_dir,
                    channels=checkpoint_extra.get("channels", "multi"),
                    clahe=ClaheConfig(**checkpoint_extra.get("clahe", {})),
                    ben_graham=BenGrahamConfig(**checkpoint_extra.get("ben_graham", {})))
    return cfg


def cmd_predict(args) -> int:
    params, extra = segnet.load_checkpoint(args.checkpoint)
    cfg = _predict_inputs(extra, args.images, args.preprocessed)
    items = list_dataset(args.images)
    out = Path(args.out)
    for sub in ("prob", "masks") + (("overlay",) if args.masks else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for item in items:
        planes = harness.load_input_planes(item, cfg)
        prob = segnet.predict(params, MultiChannelImage(planes))
        mask = segnet.binarize(prob, args.threshold)
        save_image(GrayImage(np.clip(np.floor(prob.data * 255.0 + 0.5), 0, 255)
                             .astype(np.uint8)), out / "prob" / f"{item.id}.png")
        save_image(mask, out / "masks" / f"{item.id}.png")
        if args.masks:
            gt = to_mask(load_image(Path(args.masks) / f"{item.id}.png"))
            overlay = render_overlay(mask, gt, load_image(item.image_path))
            save_image(overlay, out / "overlay" / f"{item.id}.png")
    print(f"predicted {len(items)} images -> {out}")
    return 0


def cmd_refine(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = list_dataset(args.masks)
    for item in items:
        mask = to_mask(load_image(item.image_path))
        if args.mode in ("contour", "both"):
            mask = postprocess.contour_refine(mask, args.area_threshold)
        if args.mode in ("patch", "both"):
            mask = postprocess.patch_lines(mask, args.max_dist, args.tau)
        save_image(mask, out / f"{item.id}.png")
    print(f"refined {len(items)} masks ({args.mode}) -> {out}")
    return 0


def evaluate_dirs(pred_dir, gt_dir, csv_path=None):
    """Per-image metrics with pooled and macro summary rows."""
    preds = list_dataset(pred_dir)
    rows = []
    counts = []
    reports = []
    pairs = []
    for item in preds:
        pred = to_mask(load_image(item.image_path))
        gt = to_mask(load_image(Path(gt_dir) / f"{item.id}.png"))
        c = metrics.confusion(pred, gt)
        rep = metrics.compute_metrics(c)
        rep.cl_dice = metrics.cl_dice(pred, gt)
        counts.append(c)
        reports.append(rep)
        pairs.append((pred, gt))
        rows.append((item.id, rep))
    pooled = metrics.compute_metrics(metrics.aggregate(counts))
    pooled.cl_dice = metrics.pooled_cl_dice(pairs)
    rows.append(("pooled", pooled))
    rows.append(("macro", metrics.macro_mean(reports)))
    if csv_path is not None:
        metrics.write_metrics_csv(rows, csv_path)
    return pooled


def cmd_eval(args) -> int:
    pooled = evaluate_dirs(args.pred, args.gt, args.out)
    print(f"pooled: dsc {pooled.dsc * 100:.2f} iou {pooled.iou * 100:.2f} "
          f"cldice {pooled.cl_dice * 100:.2f} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(args.seed)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name:<14} max rel err {r.max_rel_err:.3e} (tol {r.tol:.0e})")
        ok &= r.passed
    return 0 if ok else 1


ABLATION_GRID = {
    "q_order": [1, 3, 5, 7],
    "loss": ["bce", "dice", "compound"],
    "channels": ["orig", "clahe", "bg", "multi"],
}

ABLATION_BASE = {"q_order": 3, "loss": "dice", "channels": "multi"}


def run_ablation(data_dir: Path, out_dir: Path, epochs: int, seed: int) -> list[dict]:
    """Sweep one axis at a time around the base configuration and score
    each variant on the held-out fold."""
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    done = {}
    for axis, values in ABLATION_GRID.items():
        for value in values:
            setting = dict(ABLATION_BASE, **{axis: value})
            key = tuple(sorted(setting.items()))
            if key in done:
                pooled = done[key]
            else:
                run_dir = out_dir / f"{axis}_{value}"
                cfg = RunConfig(
                    images_dir=str(data_dir / "images"),
                    masks_dir=str(data_dir / "masks"),
                    preprocessed_dir=str(data_dir / "pre"),
                    out_dir=str(run_dir),
                    channels=setting["channels"],
                    seed=seed,
                    network=NetworkConfig(q_order=setting["q_order"]),
                    train=TrainConfig(max_epochs=epochs, loss=setting["loss"], seed=seed),
                )
                result = run_training(cfg)
                pooled = _score_on_test(result)
                done[key] = pooled
            results.append({"axis": axis, "value": value,
                            "dsc": pooled.dsc, "iou": pooled.iou,
                            "cl_dice": pooled.cl_dice})
    lines = ["axis,value,dsc,iou,cldice"]
    for r in results:
        lines.append(f"{r['axis']},{r['value']},{r['dsc'] * 100:.2f},"
                     f"{r['iou'] * 100:.2f},{r['cl_dice'] * 100:.2f}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return results


def _score_on_test(result: dict):
    cfg = result["config"]
    params = result["params"]
    counts, pairs = [], []
    for item in result["test_items"]:
        planes = harness.load_input_planes(item, cfg)
        prob = segnet.predict(params, MultiChannelImage(planes))
        pred = segnet.binarize(prob)
        gt = to_mask(load_image(item.mask_path))
        counts.append(metrics.confusion(pred, gt))
        pairs.append((pred, gt))
    pooled = metrics.compute_metrics(metrics.aggregate(counts))
    pooled.cl_dice = metrics.pooled_cl_dice(pairs)
    return pooled


def cmd_ablate(args) -> int:
    data_dir = Path(args.data) if args.data else Path(args.out) / "data"
    if not (data_dir / "images").exists():
        rc = main(["synth", "--out", str(data_dir), "--count", str(args.count),
                   "--size", str(args.size), "--seed", str(args.seed),
                   "--branches", "2", "--width-min", "2", "--width-max", "4.5",
                   "--noise", "4"])
        if rc:
            return rc
        rc = main(["preprocess", "--images", str(data_dir / "images"),
                   "--out", str(data_dir / "pre")])
        if rc:
            return rc
    results = run_ablation(data_dir, Path(args.out), args.epochs, args.seed)
    for r in results:
        print(f"{r['axis']:<9} {str(r['value']):<9} dsc {r['dsc'] * 100:6.2f} "
              f"iou {r['iou'] * 100:6.2f} cldice {r['cl_dice'] * 100:6.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselseg",
                                     description="vessel segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branches", type=int, default=4)
    p.add_argument("--width-min", type=float, default=3.0)
    p.add_argument("--width-max", type=float, default=7.0)
    p.add_argument("--stenosis-prob", type=float, default=0.35)
    p.add_argument("--pinch", type=float, default=0.4)
    p.add_argument("--noise", type=float, default=5.0)
    p.add_argument("--contrast", type=int, default=90)
    p.add_argument("--vignette", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("preprocess", help="write enhanced channel images")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    _add_enhance_flags(p)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("split", help="write a k-fold assignment file")
    p.add_argument("--images", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train from a run config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--preprocessed", default=None)
    p.add_argument("--masks", default=None, help="ground truth, enables overlays")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("refine", help="refine predicted masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("contour", "patch", "both"), default="both")
    p.add_argument("--area-threshold", type=int, default=20)
    p.add_argument("--max-dist", type=float, default=20.0)
    p.add_argument("--tau", type=int, default=3)
    p.set_defaults(fn=cmd_refine)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="scripted q-order/loss/channel sweeps")
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="existing phantom dataset dir")
    p.add_argument("--count", type=int, default=48)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
