"""Command-line surface: train, eval, inspect, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, load_config, serialize_config
from .data import SynthSpec, load_dataset, save_dataset, synth_scene
from .errors import ContractError, ManifestError, NumericFailure, OrientdetError, ParseError
from .model import ModelConfig, OrientedDetector


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="orientdet", description="oriented detection toy toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config output directory")

    p_train = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val"), default="val")

    p_inspect = sub.add_parser("inspect", help="dump heatmaps, assignments, and sample points")
    common(p_inspect)
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--scene", type=int, default=0, help="scene index to inspect")
    p_inspect.add_argument(
        "--what", required=True,
        choices=("gaussian", "assignment", "loc_points", "cls_points", "dck"),
    )
    p_inspect.add_argument("--iteration", type=int, default=0, help="assignment schedule position")

    p_synth = sub.add_parser("synth", help="write a synthetic dataset directory")
    common(p_synth)
    p_synth.add_argument("--count", type=int, default=None, help="number of scenes")
    return parser


def synth_spec_of(cfg: RunConfig) -> SynthSpec:
    return SynthSpec(
        image_size=cfg.image_size,
        channels=cfg.channels,
        count_min=cfg.synth_count_min,
        count_max=cfg.synth_count_max,
        size_min=cfg.synth_size_min,
        size_max=cfg.synth_size_max,
        aspect_min=cfg.synth_aspect_min,
        aspect_max=cfg.synth_aspect_max,
        num_classes=cfg.num_classes,
    )


def scene_seed(cfg: RunConfig, index: int, split: str) -> int:
    base = cfg.seed * 1_000_000
    return base + index + (500_000 if split == "val" else 0)


def build_scenes(cfg: RunConfig, split: str = "train"):
    count = cfg.train_scenes if split == "train" else cfg.val_scenes
    if cfg.data_mode == "synth":
        spec = synth_spec_of(cfg)
        return [synth_scene(scene_seed(cfg, i, split), spec) for i in range(count)]
    scenes = load_dataset(cfg.data_path, cfg.class_list())
    return scenes[:count] if count else scenes


def model_config_of(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        in_channels=cfg.channels,
        num_classes=cfg.num_classes,
        feat_channels=cfg.feat_channels,
        head_channels=cfg.head_channels,
        level_split=cfg.level_split,
        head_mode=cfg.head_mode,
        conf_prefilter=cfg.conf_prefilter,
    )


def make_trainer(cfg: RunConfig, scenes):
    from .train import Trainer, prepare_samples

    samples = prepare_samples(scenes, cfg.image_size, (8, 16), cfg.level_split, cfg.gauss_floor)
    model = OrientedDetector(model_config_of(cfg), seed=cfg.seed)
    return Trainer(
        model=model,
        samples=samples,
        assigner=cfg.assigner,
        T=cfg.T,
        theta=cfg.theta,
        gamma=cfg.gamma,
        batch_size=cfg.batch_size,
        iterations=max(cfg.iterations, 1),
        lr_start=cfg.lr_start,
        lr_end=cfg.lr_end,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        grad_clip=cfg.grad_clip,
    )


def cmd_train(cfg: RunConfig) -> int:
    from .losses import LossReport
    from .train import evaluate_model

    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    scenes = build_scenes(cfg, "train")
    trainer = make_trainer(cfg, scenes)
    metrics_path = os.path.join(cfg.out, "metrics.tsv")
    with open(metrics_path, "w") as fh:
        fh.write(LossReport.HEADER + "\n")
        print(LossReport.HEADER)
        for it in range(cfg.iterations):
            report = trainer.step()
            line = report.metrics_line(it)
            fh.write(line + "\n")
            print(line)
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
                res = evaluate_model(trainer.model, scenes, cfg.conf_thresh, cfg.nms_iou, cfg.map_mode)
                print(f"# eval@{it + 1}\tmAP50={res.map50:.4f}\tmAP75={res.map75:.4f}")
                trainer.model.save_checkpoint(os.path.join(cfg.out, "checkpoint"))
    trainer.model.save_checkpoint(os.path.join(cfg.out, "checkpoint"))
    print(f"# checkpoint written to {os.path.join(cfg.out, 'checkpoint')}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str) -> int:
    from .train import evaluate_model

    model = OrientedDetector(model_config_of(cfg), seed=cfg.seed)
    model.load_checkpoint(checkpoint)
    scenes = build_scenes(cfg, split)
    if not scenes:
        print("mean\t1.0000\t1.0000\t1.0000 (empty dataset)")
        return 0
    res = evaluate_model(model, scenes, cfg.conf_thresh, cfg.nms_iou, cfg.map_mode)
    print(res.table(cfg.class_list()))
    return 0


def _write_png(path, grid: np.ndarray) -> None:
    """Grayscale dump of a (W, H) array in [0, 1]."""
    from PIL import Image

    arr = np.clip(grid * 255.0, 0, 255).astype(np.uint8).T
    Image.fromarray(arr, mode="L").save(path)


def cmd_inspect(cfg: RunConfig, checkpoint: str, scene_index: int, what: str, iteration: int) -> int:
    import csv

    from .train import assign_sample, candidate_cells, prepare_samples

    os.makedirs(cfg.out, exist_ok=True)
    scenes = build_scenes(cfg, "train")
    if not 0 <= scene_index < len(scenes):
        raise ParseError(f"scene index {scene_index} outside dataset of {len(scenes)}")
    model = OrientedDetector(model_config_of(cfg), seed=cfg.seed)
    model.load_checkpoint(checkpoint)
    sample = prepare_samples([scenes[scene_index]], cfg.image_size, (8, 16),
                             cfg.level_split, cfg.gauss_floor)[0]
    cells = candidate_cells(sample.targets, cfg.T)
    outputs = model.forward(sample.scene.image, plan_cells=cells)
    maps = assign_sample(sample.targets, outputs, cfg.assigner, cfg.T, cfg.theta,
                         iteration, max(cfg.iterations, 1))

    if what == "gaussian":
        for lvl, spec in enumerate(sample.targets.levels):
            heat = np.zeros(spec.shape)
            for obj in sample.targets.objects:
                if obj.level == lvl:
                    heat = np.maximum(heat, obj.field.grid)
            _write_png(os.path.join(cfg.out, f"gaussian_level{lvl}.png"), heat)
    elif what == "assignment":
        for lvl, amap in enumerate(maps):
            amap.write_csv(os.path.join(cfg.out, f"assignment_level{lvl}.csv"))
            _write_png(os.path.join(cfg.out, f"assignment_level{lvl}.png"), amap.tag / 3.0)
    elif what in ("loc_points", "cls_points"):
        from .cls_sampling import cls_plan_coords
        from .loc_sampling import loc_plan_coords

        for lvl, (out, amap) in enumerate(zip(outputs, maps)):
            positives = amap.positive_cells()
            path = os.path.join(cfg.out, f"{what}_level{lvl}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["cell_x", "cell_y", "tap", "x", "y"])
                if len(positives) == 0:
                    continue
                xs, ys = positives[:, 0], positives[:, 1]
                if what == "loc_points":
                    coords = loc_plan_coords(
                        out.l_init[xs, ys], out.s_init[xs, ys],
                        out.sigma[xs, ys], positives.astype(np.float64),
                    ).data
                else:
                    rects = [
                        model._merect_of_cell(out.l_init.data[x, y], out.s_init.data[x, y],
                                              np.array([x, y]))
                        for x, y in positives
                    ]
                    coords = cls_plan_coords(rects, out.omega[xs, ys]).data
                for (cx, cy), pts in zip(positives, coords):
                    for tap in range(9):
                        writer.writerow([cx, cy, tap, f"{pts[tap, 0]:.6f}", f"{pts[tap, 1]:.6f}"])
    elif what == "dck":
        if cfg.head_mode != "deform":
            raise ParseError("dck inspection needs head_mode=deform")
        from . import autodiff as ad
        from .cls_sampling import KernelBank

        # rebuild the bank exactly as the forward pass does, on level 0
        feats = model._backbone(sample.scene.image)
        cls_t = ad.leaky_relu(model._conv(feats[0], "cls_tower"))
        pooled = ad.reshape(cls_t.mean(axis=(0, 1)), (1, -1))
        lam = ad.sigmoid(model._conv1x1(pooled, "lam_head"))[0]
        beta = ad.softmax_over_k(model._conv1x1(pooled, "beta_head")[0])
        bank = KernelBank.build(model.params["cls_kernel"], lam, beta)
        with open(os.path.join(cfg.out, "dck.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rotation", "tap", "mean_coefficient"])
            for k, kern in enumerate(bank.kernels):
                flat = kern.data.reshape(9, -1).mean(axis=1)
                for tap in range(9):
                    writer.writerow([k, tap, f"{flat[tap]:.8f}"])
            writer.writerow([])
            writer.writerow(["beta"] + [f"{b:.8f}" for b in beta.data])
            writer.writerow(["lambda"] + [f"{v:.8f}" for v in lam.data])
    print(f"# wrote {what} dumps to {cfg.out}")
    return 0


def cmd_synth(cfg: RunConfig, count: int | None) -> int:
    n = count if count is not None else cfg.train_scenes
    spec = synth_spec_of(cfg)
    scenes = [synth_scene(scene_seed(cfg, i, "train"), spec) for i in range(n)]
    save_dataset(cfg.out, scenes, cfg.class_list())
    print(f"# wrote {n} scenes to {cfg.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.checkpoint, args.scene, args.what, args.iteration)
        if args.command == "synth":
            return cmd_synth(cfg, args.count)
        raise _UsageError(f"unknown command {args.command}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ParseError, ManifestError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
