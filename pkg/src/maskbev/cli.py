"""Command-line entry point: gen, train, eval, gradcheck, render, ablate."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig


def _grid_arg(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 64 or 64x48, got {text!r}")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"grid must look like 64 or 64x48, got {text!r}")
    return dims[0], dims[1]


def _load_config(path, overrides=(), dataset=None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if overrides:
        cfg = cfg.with_overrides(list(overrides))
    if dataset:
        cfg.dataset = dataset
    return cfg


def cmd_gen(args) -> int:
    from .scenes import GeneratorConfig, GridSpec, write_dataset

    h, w = args.grid
    cfg = GeneratorConfig(grid=GridSpec(h, w, args.m_per_cell))
    m = write_dataset(args.out, args.count, args.seed, cfg, val_count=args.val_count)
    print(f"wrote {m.count} scenes ({m.count - m.val_count} train / {m.val_count} val) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training.trainer import train

    cfg = _load_config(args.config, args.set, args.dataset)
    res = train(cfg.dataset, cfg, out_dir=args.out)
    print(f"done in {res.seconds:.1f}s; checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import baseline_report, evaluate
    from .training.trainer import load_model, load_split

    if not Path(args.checkpoint).is_file():
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return 2
    cfg = _load_config(args.config, args.set, args.dataset)
    model = load_model(cfg, args.checkpoint)
    limit = cfg.train.val_limit if args.split == "val" else None
    _, scenes = load_split(cfg.dataset, args.split, limit)
    rep = evaluate(model, scenes)
    base = baseline_report(scenes)
    summary = rep.summary()
    summary["baseline_miou"] = base.miou
    summary["baseline_ap@2"] = base.ap.at(2.0)
    summary["scenes"] = len(scenes)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    results = run_suite()
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_render(args) -> int:
    from .evaluation import observe
    from .autodiff import no_grad
    from .render import BevView, render_image, write_ppm
    from .scenes import load_scene, scene_from_json
    from .training.trainer import load_model

    ckpt = Path(args.checkpoint)
    config = args.config or (ckpt.parent / "config.json")
    cfg = _load_config(config, args.set, args.dataset)
    model = load_model(cfg, ckpt)
    scene_arg = Path(args.scene)
    if scene_arg.is_file():
        scene = scene_from_json(scene_arg.read_text())
    else:
        scene = load_scene(cfg.dataset, int(args.scene))
    with no_grad():
        final = model(observe(scene, cfg.encoder.noise_sigma))[-1]
    pred = BevView.from_prediction(final.semantic_map.data, final.boxes(), final.scores(), final.labels(), cfg.grid,
                                   score_threshold=args.score_threshold)
    img = np.concatenate([render_image(BevView.from_scene(scene), args.scale), render_image(pred, args.scale)], axis=1)
    write_ppm(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation

    cfg = _load_config(args.config, args.set, args.dataset)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.train_limit is not None:
        cfg.train.train_limit = args.train_limit
    if args.val_limit is not None:
        cfg.train.val_limit = args.val_limit
    rows = run_ablation(cfg, args.knob, args.seeds, args.out)
    print(format_table(rows, args.seeds))
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .ablation import KNOBS

    p = argparse.ArgumentParser(prog="maskbev", description="Unified BEV detection + map segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, required=False):
        sp.add_argument("--config", required=required, help="run config JSON")
        sp.add_argument("--dataset", help="dataset directory (overrides the config)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=3")

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid", type=_grid_arg, default=(64, 64), help="H or HxW cells")
    g.add_argument("--m-per-cell", type=float, default=1.0)
    g.add_argument("--val-count", type=int, default=0, help="last scenes reserved for validation")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    config_args(t)
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "val", "all"], default="val")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="run the 64-bit gradient-check suite")
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="render ground truth and prediction for one scene as PPM")
    config_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True, help="scene JSON file or index into the dataset")
    r.add_argument("--out", required=True)
    r.add_argument("--scale", type=int, default=4)
    r.add_argument("--score-threshold", type=float, default=0.3)
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("ablate", help="retrain per knob setting and print a delta table")
    config_args(a)
    a.add_argument("--knob", required=True, choices=KNOBS)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--epochs", type=int)
    a.add_argument("--train-limit", type=int)
    a.add_argument("--val-limit", type=int)
    a.add_argument("--out", help="keep per-variant run directories here")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
